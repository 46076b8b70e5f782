"""Gaussians carried by the faces of a deforming triangle mesh.

Each Gaussian is attached to its nearest rest-pose face and stored in that
face's local frame (centroid, rotation built from edge cross products, scalar
scale). Deforming evaluates the same frame on the posed face and maps the
local quantities back out:

    x = T_w + k_w R_w x_local,   R = R_w R_local,   s = k_w s_local
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFaceError, StructuralError, ValidationError
from .geometry import nearest_faces
from .rotations import matrix_to_quat, quat_to_matrix

DEGENERATE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class GaussianSet:
    positions: np.ndarray
    orientations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        quat = np.asarray(self.orientations, dtype=float).reshape(-1, 4)
        scale = np.asarray(self.scales, dtype=float).reshape(-1, 3)
        opac = np.asarray(self.opacities, dtype=float).reshape(-1)
        col = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        k = len(pos)
        if not (len(quat) == len(scale) == len(opac) == len(col) == k):
            raise StructuralError("GaussianSet fields have inconsistent lengths")
        for name, arr in (("positions", pos), ("orientations", quat), ("scales", scale),
                          ("opacities", opac), ("colors", col)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"GaussianSet.{name} has non-finite values")
        if k:
            if np.max(np.abs(np.linalg.norm(quat, axis=1) - 1.0)) > 1e-6:
                raise ValidationError("GaussianSet.orientations must be unit quaternions")
            if np.any(scale <= 0):
                raise ValidationError("GaussianSet.scales must be strictly positive")
            if np.any((opac <= 0) | (opac >= 1)):
                raise ValidationError("GaussianSet.opacities must lie in (0, 1)")
            if np.any((col < 0) | (col > 1)):
                raise ValidationError("GaussianSet.colors must lie in [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "orientations", quat)
        object.__setattr__(self, "scales", scale)
        object.__setattr__(self, "opacities", opac)
        object.__setattr__(self, "colors", col)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, 3)))

    def rotation_matrices(self):
        return quat_to_matrix(self.orientations)

    def subset(self, index):
        return GaussianSet(self.positions[index], self.orientations[index],
                           self.scales[index], self.opacities[index], self.colors[index])

    def transformed(self, R, s):
        """Rigidly move every Gaussian by x -> R x + s."""
        R = np.asarray(R, dtype=float)
        rots = R @ self.rotation_matrices()
        return GaussianSet(self.positions @ R.T + s, matrix_to_quat(rots),
                           self.scales, self.opacities, self.colors)


@dataclass(frozen=True)
class FaceFrame:
    translation: np.ndarray
    rotation: np.ndarray
    scale: float


def _frames(v0, v1, v2, face_ids=None):
    a1 = v2 - v1
    e = v0 - v1
    a2 = np.cross(a1, e)
    a3 = np.cross(a1, a2)
    d = v0 - v2
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    n3 = np.linalg.norm(a3, axis=-1)
    nd = np.linalg.norm(d, axis=-1)
    bad = (n2 < DEGENERATE_EPS) | (nd < DEGENERATE_EPS)
    if np.any(bad):
        first = int(np.flatnonzero(np.atleast_1d(bad))[0])
        face = first if face_ids is None else int(np.atleast_1d(face_ids)[first])
        raise DegenerateFaceError(face)
    T = (v0 + v1 + v2) / 3.0
    R = np.stack([a1 / n1[..., None], a2 / n2[..., None], a3 / n3[..., None]], axis=-1)
    k = 0.5 * (n1 + n2 / nd)
    return T, R, k


def face_frame(v0, v1, v2) -> FaceFrame:
    T, R, k = _frames(*(np.asarray(v, dtype=float) for v in (v0, v1, v2)))
    return FaceFrame(T, R, float(k))


def face_frames(vertices, faces, face_ids=None):
    """Batched frames (T, R, k) for faces[face_ids] (all faces by default)."""
    faces = np.asarray(faces)
    if face_ids is None:
        face_ids = np.arange(len(faces))
    tri = np.asarray(vertices, dtype=float)[faces[face_ids]]
    return _frames(tri[:, 0], tri[:, 1], tri[:, 2], face_ids)


def face_frames_vjp(v0, v1, v2, grad_T, grad_R, grad_k):
    """Reverse-mode pass of the batched frame computation.

    Returns gradients for v0, v1, v2 given gradients on T (F, 3),
    R (F, 3, 3) and k (F,).
    """
    a1 = v2 - v1
    e = v0 - v1
    a2 = np.cross(a1, e)
    a3 = np.cross(a1, a2)
    d = v0 - v2
    n1 = np.linalg.norm(a1, axis=-1)[:, None]
    n2 = np.linalg.norm(a2, axis=-1)[:, None]
    n3 = np.linalg.norm(a3, axis=-1)[:, None]
    nd = np.linalg.norm(d, axis=-1)[:, None]

    def normalize_vjp(a, n, g):
        u = a / n
        return (g - u * np.sum(u * g, axis=-1, keepdims=True)) / n

    g_a1 = normalize_vjp(a1, n1, grad_R[:, :, 0])
    g_a2 = normalize_vjp(a2, n2, grad_R[:, :, 1])
    g_a3 = normalize_vjp(a3, n3, grad_R[:, :, 2])
    gk = np.asarray(grad_k, dtype=float)[:, None]
    g_a1 = g_a1 + 0.5 * gk * a1 / n1
    g_a2 = g_a2 + 0.5 * gk * a2 / (n2 * nd)
    g_d = -0.5 * gk * n2 * d / nd**3
    # a3 = a1 x a2
    g_a1 = g_a1 + np.cross(a2, g_a3)
    g_a2 = g_a2 + np.cross(g_a3, a1)
    # a2 = a1 x e
    g_a1 = g_a1 + np.cross(e, g_a2)
    g_e = np.cross(g_a2, a1)

    g_T = np.asarray(grad_T, dtype=float) / 3.0
    g_v0 = g_T + g_e + g_d
    g_v1 = g_T - g_a1 - g_e
    g_v2 = g_T + g_a1 - g_d
    return g_v0, g_v1, g_v2


@dataclass(frozen=True, eq=False)
class BindingTable:
    face_index: np.ndarray
    local_position: np.ndarray
    local_orientation: np.ndarray
    canonical_scale: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        fi = np.asarray(self.face_index, dtype=np.int64).reshape(-1)
        k = len(fi)
        arrays = dict(local_position=(3,), local_orientation=(4,), canonical_scale=(3,),
                      opacities=(), colors=(3,))
        for name, tail in arrays.items():
            arr = np.asarray(getattr(self, name), dtype=float).reshape((k,) + tail)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "face_index", fi)

    def __len__(self):
        return len(self.face_index)

    def local_rotations(self):
        return quat_to_matrix(self.local_orientation)

    def check_faces(self, num_faces):
        if len(self) and (self.face_index.min() < 0 or self.face_index.max() >= num_faces):
            raise StructuralError("binding references faces outside the mesh")


def bind_gaussians(gaussians: GaussianSet, rig) -> BindingTable:
    """Attach each Gaussian to its nearest rest-pose face of ``rig``."""
    V, F = rig.template_vertices, rig.faces
    if len(gaussians) == 0:
        return BindingTable(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 4)),
                            np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))
    face_idx, _ = nearest_faces(gaussians.positions, V, F)
    T, R, k = face_frames(V, F, face_idx)
    Rt = np.swapaxes(R, 1, 2)
    local_pos = np.einsum("kab,kb->ka", Rt, gaussians.positions - T) / k[:, None]
    local_rot = Rt @ gaussians.rotation_matrices()
    return BindingTable(face_idx, local_pos, matrix_to_quat(local_rot),
                        gaussians.scales / k[:, None], gaussians.opacities, gaussians.colors)


def deform_arrays(binding: BindingTable, posed_vertices, faces):
    """Deformed positions, rotation matrices and scales (no validation/quaternions)."""
    binding.check_faces(len(faces))
    T, R, k = face_frames(posed_vertices, faces, binding.face_index)
    pos = T + k[:, None] * np.einsum("kab,kb->ka", R, binding.local_position)
    rot = R @ binding.local_rotations()
    scale = k[:, None] * binding.canonical_scale
    return pos, rot, scale


def deform_gaussians(binding: BindingTable, posed_vertices, faces) -> GaussianSet:
    posed_vertices = np.asarray(posed_vertices, dtype=float)
    if posed_vertices.ndim != 2 or posed_vertices.shape[1] != 3:
        raise StructuralError("posed_vertices must be Nx3")
    if len(binding) == 0:
        return GaussianSet.empty()
    pos, rot, scale = deform_arrays(binding, posed_vertices, faces)
    return GaussianSet(pos, matrix_to_quat(rot), scale, binding.opacities, binding.colors)


def deform_vjp(binding: BindingTable, posed_vertices, faces, grad_positions,
               grad_rotations, grad_scales):
    """Gradient on posed vertices given gradients on deformed Gaussians.

    ``grad_rotations`` is w.r.t. the entries of each Gaussian's rotation matrix.
    """
    faces = np.asarray(faces)
    tri_idx = faces[binding.face_index]
    tri = np.asarray(posed_vertices, dtype=float)[tri_idx]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    T, R, k = _frames(v0, v1, v2, binding.face_index)
    lp = binding.local_position
    L = binding.local_rotations()

    R_lp = np.einsum("kab,kb->ka", R, lp)
    g_T = grad_positions
    g_k = np.sum(grad_positions * R_lp, axis=1) + np.sum(grad_scales * binding.canonical_scale, axis=1)
    g_R = (k[:, None, None] * np.einsum("ka,kb->kab", grad_positions, lp)
           + grad_rotations @ np.swapaxes(L, 1, 2))
    g0, g1, g2 = face_frames_vjp(v0, v1, v2, g_T, g_R, g_k)

    n = len(posed_vertices)
    grad_v = np.zeros((n, 3))
    for col, g in enumerate((g0, g1, g2)):
        for axis in range(3):
            grad_v[:, axis] += np.bincount(tri_idx[:, col], weights=g[:, axis], minlength=n)
    return grad_v


def compose_scene(hand: GaussianSet, obj: GaussianSet) -> GaussianSet:
    """Union of two Gaussian sets, hand first."""
    return GaussianSet(np.concatenate([hand.positions, obj.positions]),
                       np.concatenate([hand.orientations, obj.orientations]),
                       np.concatenate([hand.scales, obj.scales]),
                       np.concatenate([hand.opacities, obj.opacities]),
                       np.concatenate([hand.colors, obj.colors]))
