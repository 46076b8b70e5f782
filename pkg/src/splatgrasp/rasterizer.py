"""Reference CPU rasterizer for 3D Gaussians with an exact reverse pass.

Pixel (row y, column x) samples the image plane at coordinates (x, y).
Gaussians are sorted by view depth once per frame (ties by index) and each
pixel composites its fragments front to back:

    C = sum_i c_i a_i prod_{j<i} (1 - a_j) + bg prod_j (1 - a_j)
    a_i = min(alpha_max, o_i exp(-q_i / 2)),  q_i = d^T cov2d^-1 d

Fragments outside the cutoff ellipse or below ``alpha_min`` are dropped.
Fragments are kept in a sparse list and packed into a (pixels, depth slots)
table so that transmittance is a plain cumulative product.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError, ValidationError
from .rotations import quat_to_matrix, quat_to_matrix_vjp
from .splat_binding import GaussianSet


@dataclass(frozen=True)
class RasterConfig:
    blur: float = 0.3
    sigma_cutoff: float = 3.0
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    min_det: float = 1e-12


DEFAULT_CONFIG = RasterConfig()


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    near_clip: float = 0.01

    def __post_init__(self):
        E = np.asarray(self.world_to_camera, dtype=float)
        if E.shape != (4, 4):
            raise StructuralError("world_to_camera must be a 4x4 matrix")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValidationError("image dimensions must be at least 1")
        if not self.near_clip > 0:
            raise ValidationError("near_clip must be positive")
        R = E[:3, :3]
        if (np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6
                or np.any(E[3] != (0.0, 0.0, 0.0, 1.0))):
            raise ValidationError("world_to_camera must be a rigid transform")
        object.__setattr__(self, "world_to_camera", E)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, near_clip=0.01):
        """Camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
        eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        E = np.eye(4)
        E[:3, :3] = R
        E[:3, 3] = -R @ eye
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, E, near_clip)


@dataclass(frozen=True, eq=False)
class RenderedImage:
    pixels: np.ndarray
    alpha: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class RenderAux:
    num_gaussians: int
    camera: Camera
    config: RasterConfig
    background: np.ndarray
    proj: dict
    frag: dict
    table: dict


@dataclass(frozen=True, eq=False)
class RenderGradients:
    d_positions: np.ndarray
    d_orientations: np.ndarray
    d_scales: np.ndarray
    d_opacities: np.ndarray
    d_colors: np.ndarray
    d_rotations: np.ndarray  # w.r.t. rotation-matrix entries, (K, 3, 3)


def _project(positions, quats, scales, camera: Camera, config: RasterConfig):
    W = camera.rotation
    t = positions @ W.T + camera.translation
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    in_front = tz > camera.near_clip
    z = np.where(in_front, tz, 1.0)
    K = len(positions)
    J = np.zeros((K, 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * tx / z**2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * ty / z**2
    R = quat_to_matrix(quats) if K else np.zeros((0, 3, 3))
    M = R * scales[:, None, :]
    Sigma = M @ np.swapaxes(M, 1, 2)
    T = J @ W
    cov = T @ Sigma @ np.swapaxes(T, 1, 2) + config.blur * np.eye(2)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    invertible = det >= config.min_det
    safe_det = np.where(invertible, det, 1.0)
    conic = np.empty_like(cov)
    conic[:, 0, 0] = cov[:, 1, 1] / safe_det
    conic[:, 1, 1] = cov[:, 0, 0] / safe_det
    conic[:, 0, 1] = -cov[:, 0, 1] / safe_det
    conic[:, 1, 0] = -cov[:, 1, 0] / safe_det
    mean2d = np.stack([camera.fx * tx / z + camera.cx, camera.fy * ty / z + camera.cy], axis=1)
    return dict(view=t, depth=tz, in_front=in_front, invertible=invertible, J=J, T=T,
                R=R, M=M, Sigma=Sigma, cov=cov, conic=conic, mean2d=mean2d)


def project_gaussian(mean, orientation, scale, camera: Camera, config: RasterConfig = DEFAULT_CONFIG):
    """Project one Gaussian; returns (mean2d, cov2d, depth) or None when culled."""
    p = _project(np.asarray(mean, dtype=float).reshape(1, 3),
                 np.asarray(orientation, dtype=float).reshape(1, 4),
                 np.asarray(scale, dtype=float).reshape(1, 3), camera, config)
    if not p["in_front"][0]:
        return None
    return p["mean2d"][0], p["cov"][0], float(p["depth"][0])


def render(scene: GaussianSet, camera: Camera, background=(0.0, 0.0, 0.0),
           config: RasterConfig = DEFAULT_CONFIG):
    bg = np.asarray(background, dtype=float).reshape(3)
    H, Wd = camera.height, camera.width
    K = len(scene)
    proj = _project(scene.positions, scene.orientations, scene.scales, camera, config)
    usable = proj["in_front"] & proj["invertible"]
    diagnostics = dict(culled=int(np.sum(~proj["in_front"])),
                       degenerate=int(np.sum(proj["in_front"] & ~proj["invertible"])))

    # pixel bounding boxes of the cutoff ellipses
    cov, mean2d = proj["cov"], proj["mean2d"]
    ext_x = config.sigma_cutoff * np.sqrt(np.maximum(cov[:, 0, 0], 0.0))
    ext_y = config.sigma_cutoff * np.sqrt(np.maximum(cov[:, 1, 1], 0.0))
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(mean2d[:, 0] - ext_x), 0, Wd)
        x1 = np.clip(np.floor(mean2d[:, 0] + ext_x) + 1, 0, Wd)
        y0 = np.clip(np.ceil(mean2d[:, 1] - ext_y), 0, H)
        y1 = np.clip(np.floor(mean2d[:, 1] + ext_y) + 1, 0, H)
    bw = np.where(usable, np.maximum(x1 - x0, 0), 0).astype(np.int64)
    bh = np.where(usable, np.maximum(y1 - y0, 0), 0).astype(np.int64)
    x0 = np.where(usable, x0, 0).astype(np.int64)
    y0 = np.where(usable, y0, 0).astype(np.int64)
    counts = bw * bh
    gid = np.repeat(np.arange(K), counts)
    local = np.arange(len(gid)) - np.repeat(np.cumsum(counts) - counts, counts)
    bw_g = bw[gid]
    px = x0[gid] + local % np.maximum(bw_g, 1)
    py = y0[gid] + local // np.maximum(bw_g, 1)

    dx = px - mean2d[gid, 0]
    dy = py - mean2d[gid, 1]
    conic = proj["conic"]
    ca, cb, cc = conic[gid, 0, 0], conic[gid, 0, 1], conic[gid, 1, 1]
    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    inside = q <= config.sigma_cutoff**2
    G = np.exp(-0.5 * q)
    alpha_raw = scene.opacities[gid] * G
    keep = inside & (alpha_raw >= config.alpha_min)
    gid, px, py, dx, dy, G, alpha_raw = (a[keep] for a in (gid, px, py, dx, dy, G, alpha_raw))
    clamped = alpha_raw > config.alpha_max
    alpha = np.where(clamped, config.alpha_max, alpha_raw)

    # depth order, ties by index
    rank = np.empty(K, dtype=np.int64)
    rank[np.argsort(proj["depth"], kind="stable")] = np.arange(K)
    pix = py * Wd + px
    order = np.argsort(pix * max(K, 1) + rank[gid], kind="stable")
    gid, pix, dx, dy, G, alpha, clamped = (a[order] for a in (gid, pix, dx, dy, G, alpha, clamped))

    per_pixel = np.bincount(pix, minlength=H * Wd)
    active = np.flatnonzero(per_pixel)
    row_of_pixel = np.full(H * Wd, -1, dtype=np.int64)
    row_of_pixel[active] = np.arange(len(active))
    starts = np.cumsum(per_pixel) - per_pixel
    row = row_of_pixel[pix]
    slot = np.arange(len(pix)) - starts[pix]
    L = int(per_pixel.max()) if len(pix) else 0

    A = np.zeros((len(active), L))
    A[row, slot] = alpha
    gid_tab = np.zeros((len(active), L), dtype=np.int64)
    gid_tab[row, slot] = gid
    trans = np.cumprod(1.0 - A, axis=1)
    T_final = trans[:, -1] if L else np.ones(len(active))
    T_excl = np.concatenate([np.ones((len(active), 1)), trans[:, :-1]], axis=1) if L else A
    weight = A * T_excl
    cols = scene.colors[gid_tab] if K else np.zeros((len(active), L, 3))
    rgb = np.einsum("pl,plc->pc", weight, cols) + T_final[:, None] * bg

    pixels = np.broadcast_to(bg, (H * Wd, 3)).copy()
    pixels[active] = rgb
    alpha_img = np.zeros(H * Wd)
    alpha_img[active] = 1.0 - T_final
    pixels = np.clip(pixels, 0.0, 1.0).reshape(H, Wd, 3)
    alpha_img = np.clip(alpha_img, 0.0, 1.0).reshape(H, Wd)

    frag = dict(gid=gid, pix=pix, dx=dx, dy=dy, G=G, clamped=clamped, row=row, slot=slot)
    table = dict(active=active, A=A, T_excl=T_excl, T_final=T_final, gid=gid_tab, cols=cols)
    aux = RenderAux(K, camera, config, bg, proj, frag, table)
    return RenderedImage(pixels, alpha_img, diagnostics), aux


def fragment_signature(aux: RenderAux):
    """Per-pixel description of which fragments contributed (and which were clamped)."""
    f = aux.frag
    code = f["gid"] * 2 + f["clamped"]
    H, W = aux.camera.height, aux.camera.width
    sig = [() for _ in range(H * W)]
    for p, c in zip(f["pix"].tolist(), code.tolist()):
        sig[p] = sig[p] + (c,)
    return sig


def render_backward(aux: RenderAux, scene: GaussianSet, camera: Camera, d_image) -> RenderGradients:
    K = len(scene)
    if K != aux.num_gaussians:
        raise StructuralError("render aux was produced for a different scene")
    if (camera.width, camera.height) != (aux.camera.width, aux.camera.height) or not np.array_equal(
            camera.world_to_camera, aux.camera.world_to_camera):
        raise StructuralError("render aux was produced for a different camera")
    d_image = np.asarray(d_image, dtype=float)
    H, Wd = camera.height, camera.width
    if d_image.shape != (H, Wd, 3):
        raise StructuralError(f"d_image must have shape {(H, Wd, 3)}, got {d_image.shape}")
    cfg = aux.config
    tab, frag, proj = aux.table, aux.frag, aux.proj

    g_pix = d_image.reshape(-1, 3)[tab["active"]]
    A, T_excl, cols = tab["A"], tab["T_excl"], tab["cols"]
    weight = A * T_excl
    contrib = weight[..., None] * cols
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    after = suffix + (tab["T_final"][:, None] * aux.background[None, :])[:, None, :]
    dC_dA = cols * T_excl[..., None] - after / (1.0 - A)[..., None]
    dL_dA = np.einsum("plc,pc->pl", dC_dA, g_pix)

    gid, row, slot = frag["gid"], frag["row"], frag["slot"]
    w_f = weight[row, slot]
    g_f = g_pix[row]
    d_colors = np.stack([np.bincount(gid, weights=w_f * g_f[:, c], minlength=K)
                         for c in range(3)], axis=1) if K else np.zeros((0, 3))

    dL_dalpha = np.where(frag["clamped"], 0.0, dL_dA[row, slot])
    G = frag["G"]
    d_opacities = np.bincount(gid, weights=dL_dalpha * G, minlength=K).astype(float)
    dL_dq = -0.5 * dL_dalpha * scene.opacities[gid] * G
    dx, dy = frag["dx"], frag["dy"]
    conic = proj["conic"]
    ca, cb, cc = conic[gid, 0, 0], conic[gid, 0, 1], conic[gid, 1, 1]
    g_mx = np.bincount(gid, weights=dL_dq * -2.0 * (ca * dx + cb * dy), minlength=K)
    g_my = np.bincount(gid, weights=dL_dq * -2.0 * (cb * dx + cc * dy), minlength=K)
    g_A = np.zeros((K, 2, 2))
    g_A[:, 0, 0] = np.bincount(gid, weights=dL_dq * dx * dx, minlength=K)
    g_A[:, 0, 1] = g_A[:, 1, 0] = np.bincount(gid, weights=dL_dq * dx * dy, minlength=K)
    g_A[:, 1, 1] = np.bincount(gid, weights=dL_dq * dy * dy, minlength=K)

    # conic = cov^-1 ; cov = T Sigma T^T + blur I ; T = J W
    g_cov = -conic @ g_A @ conic
    Tm, Sigma, M, R = proj["T"], proj["Sigma"], proj["M"], proj["R"]
    g_Sigma = np.swapaxes(Tm, 1, 2) @ g_cov @ Tm
    g_T = 2.0 * g_cov @ Tm @ Sigma
    W = camera.rotation
    g_J = g_T @ W.T

    t = proj["view"]
    tx, ty = t[:, 0], t[:, 1]
    z = np.where(proj["in_front"], t[:, 2], 1.0)
    fx, fy = camera.fx, camera.fy
    g_t = np.zeros((K, 3))
    g_t[:, 0] = -fx / z**2 * g_J[:, 0, 2] + fx / z * g_mx
    g_t[:, 1] = -fy / z**2 * g_J[:, 1, 2] + fy / z * g_my
    g_t[:, 2] = (-fx / z**2 * g_J[:, 0, 0] + 2 * fx * tx / z**3 * g_J[:, 0, 2]
                 - fy / z**2 * g_J[:, 1, 1] + 2 * fy * ty / z**3 * g_J[:, 1, 2]
                 - fx * tx / z**2 * g_mx - fy * ty / z**2 * g_my)
    d_positions = g_t @ W

    g_M = 2.0 * g_Sigma @ M
    d_scales = np.sum(g_M * R, axis=1)
    d_rotations = g_M * scene.scales[:, None, :]
    d_orientations = quat_to_matrix_vjp(scene.orientations, d_rotations) if K else np.zeros((0, 4))

    # culled or degenerate splats produced no fragments, so every sum above is
    # already zero for them; this guards the projection terms anyway
    dead = ~(proj["in_front"] & proj["invertible"])
    for arr in (d_positions, d_scales, d_orientations, d_rotations):
        arr[dead] = 0.0
    return RenderGradients(d_positions, d_orientations, d_scales, d_opacities, d_colors, d_rotations)
