"""Vectorized point/triangle queries shared by binding and contact checks."""
import numpy as np


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p, broadcast over leading axes.

    Region classification after Ericson, "Real-Time Collision Detection" 5.1.5.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (p, a, b, c)))
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        out = a + ab * v_in[..., None] + ac * w_in[..., None]

        # edge regions
        cond_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out = np.where(cond_bc[..., None], b + (c - b) * w_bc[..., None], out)

        cond_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        w_ac = d2 / (d2 - d6)
        out = np.where(cond_ac[..., None], a + ac * w_ac[..., None], out)

        out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)

        cond_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v_ab = d1 / (d1 - d3)
        out = np.where(cond_ab[..., None], a + ab * v_ab[..., None], out)

    # applied lowest priority first: the last np.where wins
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    return out


def point_triangle_distances(points, vertices, faces, chunk=2048):
    """Dense (P, F) matrix of Euclidean distances."""
    points = np.asarray(points, dtype=float)
    tri = np.asarray(vertices, dtype=float)[np.asarray(faces)]
    out = np.empty((len(points), len(tri)))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk, None, :]
        q = closest_points_on_triangles(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        out[s:s + chunk] = np.linalg.norm(p - q, axis=-1)
    return out


def nearest_faces(points, vertices, faces, chunk=None):
    """Index of (and distance to) the nearest triangle; ties go to the lowest index."""
    points = np.asarray(points, dtype=float)
    nf = max(len(faces), 1)
    chunk = chunk or max(1, 2_000_000 // nf)
    idx = np.empty(len(points), dtype=np.int64)
    dist = np.empty(len(points))
    for s in range(0, len(points), chunk):
        D = point_triangle_distances(points[s:s + chunk], vertices, faces, chunk=chunk)
        idx[s:s + chunk] = np.argmin(D, axis=1)  # argmin returns the first minimum
        dist[s:s + chunk] = D[np.arange(len(D)), idx[s:s + chunk]]
    return idx, dist


def winding_numbers(points, vertices, faces, chunk=1024):
    """Generalized winding number (Jacobson et al. 2013) of a triangle soup.

    Close to 1 inside a closed, outward-oriented mesh and 0 outside.
    """
    points = np.asarray(points, dtype=float)
    tri = np.asarray(vertices, dtype=float)[np.asarray(faces)]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        d = tri[None, :, :, :] - points[s:s + chunk, None, None, :]
        a, b, c = d[..., 0, :], d[..., 1, :], d[..., 2, :]
        la, lb, lc = (np.linalg.norm(x, axis=-1) for x in (a, b, c))
        det = np.einsum("...i,...i->...", a, np.cross(b, c))
        denom = (la * lb * lc + np.einsum("...i,...i->...", a, b) * lc
                 + np.einsum("...i,...i->...", b, c) * la
                 + np.einsum("...i,...i->...", c, a) * lb)
        out[s:s + chunk] = np.sum(2.0 * np.arctan2(det, denom), axis=1) / (4.0 * np.pi)
    return out


def signed_distances(points, vertices, faces):
    """Distance to the surface, negative inside (winding number > 1/2)."""
    _, dist = nearest_faces(points, vertices, faces)
    inside = winding_numbers(points, vertices, faces) > 0.5
    return np.where(inside, -dist, dist)
