"""Procedural assets: a low-poly 21-joint hand rig, Gaussian clouds and cameras.

These stand in for MANO and captured 3DGS models in tests, demos and the
bundled rig file.
"""
import numpy as np

from .hand_rig import NUM_JOINTS, HandPose, HandRig
from .rasterizer import Camera
from .rotations import matrix_to_quat, rot_x, rot_y, rot_z
from .splat_binding import GaussianSet, face_frames

# (base position, direction in the palm plane, segment lengths, base radius)
_FINGERS = (
    ((0.024, 0.022, 0.0), (0.80, 0.60), (0.038, 0.032, 0.028), 0.0105),  # thumb
    ((0.030, 0.092, 0.0), (0.10, 1.00), (0.042, 0.026, 0.022), 0.0095),  # index
    ((0.009, 0.096, 0.0), (0.00, 1.00), (0.046, 0.029, 0.024), 0.0095),  # middle
    ((-0.012, 0.092, 0.0), (-0.08, 1.00), (0.043, 0.027, 0.022), 0.0090),  # ring
    ((-0.031, 0.083, 0.0), (-0.18, 1.00), (0.034, 0.021, 0.019), 0.0080),  # pinky
)
_RING_SIDES = 6


def _rest_joints():
    J = np.zeros((NUM_JOINTS, 3))
    parents = np.full(NUM_JOINTS, -1)
    for f, (base, direction, lengths, _) in enumerate(_FINGERS):
        d = np.array([direction[0], direction[1], 0.0])
        d /= np.linalg.norm(d)
        first = 1 + 4 * f
        J[first] = base
        parents[first] = 0
        for k, length in enumerate(lengths):
            J[first + k + 1] = J[first + k] + length * d
            parents[first + k + 1] = first + k
    return J, parents


def build_toy_rig() -> HandRig:
    """Palm slab plus five hexagonal finger tubes, skinned to a 21-joint tree.

    The hand lies in the z = 0 plane with fingers along +y and the palm facing +z.
    """
    J, parents = _rest_joints()
    verts, weights, faces = [], [], []

    def add_vertex(p, w):
        verts.append(np.asarray(p, dtype=float))
        row = np.zeros(NUM_JOINTS)
        for j, val in w.items():
            row[j] += val
        weights.append(row)
        return len(verts) - 1

    # palm: a subdivided box spanning the wrist to the knuckles
    nx, ny = 5, 5
    xs = np.linspace(-0.040, 0.040, nx)
    ys = np.linspace(-0.010, 0.088, ny)
    half = 0.011
    grid = {}
    for side, z in (("top", half), ("bottom", -half)):
        for i, x in enumerate(xs):
            for k, y in enumerate(ys):
                grid[side, i, k] = add_vertex((x, y, z), {0: 1.0})
    for i in range(nx - 1):
        for k in range(ny - 1):
            a, b = grid["top", i, k], grid["top", i + 1, k]
            c, d = grid["top", i + 1, k + 1], grid["top", i, k + 1]
            faces += [(a, b, c), (a, c, d)]
            a, b = grid["bottom", i, k], grid["bottom", i + 1, k]
            c, d = grid["bottom", i + 1, k + 1], grid["bottom", i, k + 1]
            faces += [(a, c, b), (a, d, c)]
    # palm rim
    rim = ([(i, 0) for i in range(nx)] + [(nx - 1, k) for k in range(1, ny)]
           + [(i, ny - 1) for i in range(nx - 2, -1, -1)] + [(0, k) for k in range(ny - 2, 0, -1)])
    for (i0, k0), (i1, k1) in zip(rim, rim[1:] + rim[:1]):
        a, b = grid["top", i0, k0], grid["top", i1, k1]
        c, d = grid["bottom", i1, k1], grid["bottom", i0, k0]
        faces += [(a, d, c), (a, c, b)]

    tips = []
    for f, (_, direction, lengths, radius) in enumerate(_FINGERS):
        first = 1 + 4 * f
        d = J[first + 1] - J[first]
        d /= np.linalg.norm(d)
        u = np.array([0.0, 0.0, 1.0])
        v = np.cross(d, u)
        # ring stations: joint rings and mid-segment rings along the chain
        stations = []
        for k in range(3):
            j = first + k
            parent_w = {parents[j]: 0.5, j: 0.5}
            stations.append((J[j], parent_w, radius * (1 - 0.08 * k)))
            stations.append((0.5 * (J[j] + J[j + 1]), {j: 1.0}, radius * (1 - 0.08 * k - 0.04)))
        stations.append((J[first + 3], {first + 2: 1.0}, radius * 0.72))
        rings = []
        for center, w, r in stations:
            ring = []
            for s in range(_RING_SIDES):
                ang = 2 * np.pi * s / _RING_SIDES
                ring.append(add_vertex(center + r * (np.cos(ang) * u + np.sin(ang) * v), w))
            rings.append(ring)
        for r0, r1 in zip(rings, rings[1:]):
            for s in range(_RING_SIDES):
                a, b = r0[s], r0[(s + 1) % _RING_SIDES]
                c, e = r1[(s + 1) % _RING_SIDES], r1[s]
                faces += [(a, b, c), (a, c, e)]
        apex = add_vertex(J[first + 3] + 0.7 * radius * d, {first + 2: 1.0})
        last = rings[-1]
        for s in range(_RING_SIDES):
            faces.append((last[s], last[(s + 1) % _RING_SIDES], apex))
        tips.append(np.array(last + [apex]))

    return HandRig(np.array(verts), np.array(faces), parents, J, np.array(weights), tuple(tips))


def grasp_pose(flexion=(0.35, 0.55, 0.45), thumb=(0.35, 0.30, 0.25), global_rotation=None,
               translation=(0.0, 0.0, 0.0)) -> HandPose:
    """Fingers curled toward the palm (+z) by the given per-joint angles (radians)."""
    h = np.tile(np.eye(3), (NUM_JOINTS, 1, 1))
    for f in range(5):
        angles = thumb if f == 0 else flexion
        direction = np.array(_FINGERS[f][1] + (0.0,))
        direction /= np.linalg.norm(direction)
        axis = np.cross(direction, [0.0, 0.0, 1.0])
        axis /= np.linalg.norm(axis)
        for k, ang in enumerate(angles):
            # positive rotation about direction x z bends the finger toward +z
            K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
            h[1 + 4 * f + k] = np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K
    Y = np.eye(3) if global_rotation is None else np.asarray(global_rotation)
    return HandPose(Y, np.asarray(translation, dtype=float), h)


def sample_hand_gaussians(rig: HandRig, count=None, seed=0, per_face=1) -> GaussianSet:
    """Gaussians scattered on the rest-pose mesh, flattened along each face."""
    rng = np.random.default_rng(seed)
    F = rig.faces
    if count is None:
        face_ids = np.repeat(np.arange(len(F)), per_face)
    else:
        face_ids = rng.integers(0, len(F), size=count)
    tri = rig.template_vertices[F[face_ids]]
    bary = rng.dirichlet((2.0, 2.0, 2.0), size=len(face_ids))
    pos = np.einsum("kv,kva->ka", bary, tri)
    _, R, _ = face_frames(rig.template_vertices, F, face_ids)
    normal = R[:, :, 1]
    pos = pos + normal * rng.normal(0.0, 0.0003, size=(len(face_ids), 1))
    edge = np.linalg.norm(tri[:, 2] - tri[:, 1], axis=1)
    scales = np.stack([0.35 * edge, np.full(len(edge), 0.0012), 0.30 * edge], axis=1)
    spin = np.stack([rot_y(a) for a in rng.uniform(0, np.pi, len(face_ids))])
    # rot_y spins about the face-normal column (index 1) of the frame
    orient = matrix_to_quat(R @ spin)
    base = np.array([0.88, 0.66, 0.52])
    finger = np.argmax(rig.skinning_weights[F[face_ids, 0]], axis=1)
    tint = np.where(finger[:, None] == 0, 0.0, 0.05 * np.sin(finger[:, None] * np.array([1.3, 2.1, 0.7])))
    colors = np.clip(base + tint + rng.normal(0.0, 0.06, size=(len(face_ids), 3)), 0.02, 0.98)
    opac = rng.uniform(0.75, 0.95, len(face_ids))
    return GaussianSet(pos, orient, scales, opac, colors)


def box_object_gaussians(center=(0.0, 0.055, 0.045), size=(0.05, 0.06, 0.05), per_axis=6,
                         seed=1) -> GaussianSet:
    """Checker-coloured Gaussians on the surface of an axis-aligned box."""
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=float)
    size = np.asarray(size, dtype=float)
    pts, normals = [], []
    g = (np.arange(per_axis) + 0.5) / per_axis - 0.5
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        for sign in (-1.0, 1.0):
            for u in g:
                for v in g:
                    p = np.zeros(3)
                    p[axis] = 0.5 * sign
                    p[a], p[b] = u, v
                    pts.append(p * size + center)
                    n = np.zeros(3)
                    n[axis] = sign
                    normals.append(n)
    pts, normals = np.array(pts), np.array(normals)
    cell = np.floor((pts - center) / (size / 3.0)).astype(int)
    checker = (cell.sum(axis=1) % 2).astype(bool)
    colors = np.where(checker[:, None], [0.15, 0.35, 0.80], [0.95, 0.80, 0.20])
    colors = np.clip(colors + rng.normal(0, 0.03, colors.shape), 0, 1)
    scales = np.empty((len(pts), 3))
    cell_size = size / per_axis
    for i, n in enumerate(normals):
        scales[i] = np.where(n != 0, 0.001, 0.45 * cell_size)
    rots = np.stack([rot_z(a) for a in rng.uniform(-0.2, 0.2, len(pts))])
    orient = matrix_to_quat(rots)
    return GaussianSet(pts, orient, scales, np.full(len(pts), 0.9), colors)


def orbit_cameras(target=(0.0, 0.06, 0.02), radius=0.42, count=4, size=128, fov_deg=50.0,
                  elevation_deg=25.0):
    """Cameras evenly spaced on a ring above the palm side, looking at ``target``."""
    target = np.asarray(target, dtype=float)
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    cams = []
    el = np.radians(elevation_deg)
    for i in range(count):
        az = 2 * np.pi * i / count + np.pi / 4
        # ring around the palm normal (+z), tilted so the palm side is visible
        offset = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az) * 0.6,
                                    0.55 + 0.45 * np.sin(el)])
        offset = radius * offset / np.linalg.norm(offset)
        cams.append(Camera.look_at(target + offset, target, (0.0, 1.0, 0.0), f, f, size, size))
    return cams


def unit_box_mesh(center=(0.0, 0.0, 0.0), size=1.0, subdivisions=1):
    """Closed, outward-oriented triangulated cube."""
    n = subdivisions + 1
    verts, faces, index = [], [], {}
    s = np.linspace(-0.5, 0.5, n + 1)

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        for sign in (-1.0, 1.0):
            for i in range(n):
                for k in range(n):
                    quad = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = 0.5 * sign
                        p[a], p[b] = s[i + du], s[k + dv]
                        quad.append(vid(p))
                    # keep normals pointing out
                    e_a, e_b = np.eye(3)[a], np.eye(3)[b]
                    if np.dot(np.cross(e_a, e_b), np.eye(3)[axis]) * sign > 0:
                        faces += [(quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])]
                    else:
                        faces += [(quad[0], quad[2], quad[1]), (quad[0], quad[3], quad[2])]
    V = np.array(verts) * size + np.asarray(center, dtype=float)
    return V, np.array(faces)


def icosphere_mesh(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)):
    """Outward-oriented icosphere; 20 * 4**subdivisions triangles."""
    t = (1.0 + 5 ** 0.5) / 2.0
    V = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    V = [np.array(v, dtype=float) / np.linalg.norm(v) for v in V]
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache, new_faces = {}, []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = V[i] + V[j]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        for a, b, c in F:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        F = new_faces
    return np.array(V) * radius + np.asarray(center, dtype=float), np.array(F)
