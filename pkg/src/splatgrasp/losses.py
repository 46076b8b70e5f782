"""Training and refinement objectives plus the keypoint decoding helpers."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import StructuralError, ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lambda_verts: float = 1e-4
    lambda_joints: float = 1e-4
    lambda_pose: float = 10.0
    lambda_transl: float = 10.0
    lambda_reg: float = 1.0
    lambda_1: float = 0.8

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"{name} must be a non-negative number")
        if self.lambda_1 > 1:
            raise ValidationError("lambda_1 must lie in [0, 1]")


@dataclass
class LossBreakdown:
    verts: float
    joints: float
    pose: float
    transl: float
    reg: float
    mano: float
    img: Optional[float] = None
    total: Optional[float] = None
    alpha: Optional[float] = None

    def as_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class HeatmapStack:
    """Per-joint score maps; ``values[j, u, v]`` with u on the first spatial axis."""
    values: np.ndarray
    beta: np.ndarray = field(default=None)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 3 or min(vals.shape[1:], default=0) < 1:
            raise StructuralError(f"heatmaps must have shape (joints, T, E), got {vals.shape}")
        beta = np.ones(len(vals)) if self.beta is None else np.broadcast_to(
            np.asarray(self.beta, dtype=float), (len(vals),)).copy()
        if np.any(~(beta > 0)):
            raise ValidationError("beta must be strictly positive")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class ManoTerms:
    """Quantities compared by the MANO losses for one hand."""
    vertices: np.ndarray
    joints: np.ndarray
    joint_rotations: np.ndarray
    translation: np.ndarray


def positional_encoding(x, y, D, tau=10000.0):
    """Sine/cosine encoding of a 2D coordinate.

    Returns 2*D values: D for x then D for y, each interleaved as
    [sin(c / tau^(0/D)), cos(c / tau^(1/D)), sin(c / tau^(2/D)), ...].
    """
    if int(D) != D or D < 2 or D % 2:
        raise ValidationError(f"encoding dimension must be an even integer >= 2, got {D}")
    if not tau > 0:
        raise ValidationError("tau must be positive")
    i = np.arange(D // 2)
    sin_div = tau ** (2 * i / D)
    cos_div = tau ** ((2 * i + 1) / D)

    def encode(c):
        out = np.empty(D)
        out[0::2] = np.sin(c / sin_div)
        out[1::2] = np.cos(c / cos_div)
        return out

    return np.concatenate([encode(float(x)), encode(float(y))])


def soft_argmax(stack: HeatmapStack):
    """Expected (u, v) grid coordinates under softmax(beta_j * M_j) over all cells."""
    M = stack.values
    if not np.all(np.isfinite(M)):
        raise ValidationError("heatmap values must be finite")
    n, T, E = M.shape
    logits = (stack.beta[:, None, None] * M).reshape(n, -1)
    logits = logits - logits.max(axis=1, keepdims=True)
    H = np.exp(logits)
    H /= H.sum(axis=1, keepdims=True)
    H = H.reshape(n, T, E)
    u = np.einsum("juv,u->j", H, np.arange(T, dtype=float))
    v = np.einsum("juv,v->j", H, np.arange(E, dtype=float))
    # weights summing to 1 + ulp can push the expectation just past the last cell
    return np.stack([np.clip(u, 0, T - 1), np.clip(v, 0, E - 1)], axis=1)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise StructuralError(f"{what}: shapes {a.shape} and {b.shape} differ")


def mano_losses(pred: ManoTerms, truth: ManoTerms, weights: LossWeights = LossWeights()) -> LossBreakdown:
    arrays = []
    for name in ("vertices", "joints", "joint_rotations", "translation"):
        a = np.asarray(getattr(pred, name), dtype=float)
        b = np.asarray(getattr(truth, name), dtype=float)
        _check_same(a, b, name)
        arrays.append((a, b))
    (Vp, Vt), (Jp, Jt), (hp, ht), (tp, tt) = arrays
    if Jp.shape != (21, 3) or hp.shape != (21, 3, 3) or tp.shape != (3,) or Vp.ndim != 2:
        raise StructuralError("expected N x 3 vertices, 21 x 3 joints, 21 x 3 x 3 rotations")
    verts = weights.lambda_verts * np.mean(np.sum((Vp - Vt) ** 2, axis=1))
    joints = weights.lambda_joints * np.mean(np.sum((Jp - Jt) ** 2, axis=1))
    pose = weights.lambda_pose * np.mean(np.sum((hp - ht) ** 2, axis=(1, 2)))
    transl = weights.lambda_transl * float(np.sum((tp - tt) ** 2))
    reg = weights.lambda_reg * np.mean(np.sum((np.eye(3) - hp) ** 2, axis=(1, 2)))
    vals = [float(v) for v in (verts, joints, pose, transl, reg)]
    return LossBreakdown(*vals, mano=sum(vals))


def cosine_alpha(o_curr, o_last):
    if o_last < 1 or not 0 <= o_curr <= o_last:
        raise ValidationError(f"need 0 <= o_curr <= o_last and o_last >= 1 (got {o_curr}, {o_last})")
    if o_curr == o_last:
        return 0.0
    return 0.5 * (1.0 + np.cos(np.pi * o_curr / o_last))


def combined_loss(mano, img, o_curr, o_last):
    """Returns (total, alpha) with the photometric term ramped in over epochs."""
    alpha = cosine_alpha(o_curr, o_last)
    return alpha * mano + (1.0 - alpha) * img, alpha


def _gaussian_window(size, sigma):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x**2 / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over the two leading axes
    out = sliding_window_view(img, len(g), axis=0) @ g
    out = sliding_window_view(out, len(g), axis=1) @ g
    return out


def _filter_valid_adjoint(grad, g):
    m = len(g) - 1
    padded = np.pad(grad, ((m, m), (m, m)) + ((0, 0),) * (grad.ndim - 2))
    # the window is symmetric, so the adjoint is the same correlation on the padded map
    return _filter_valid(padded, g[::-1])


def _ssim_parts(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise StructuralError(f"image shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size = min(SSIM_WINDOW, a.shape[0], a.shape[1])
    if size % 2 == 0:
        size -= 1
    g = _gaussian_window(size, SSIM_SIGMA)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    e_aa, e_bb, e_ab = _filter_valid(a * a, g), _filter_valid(b * b, g), _filter_valid(a * b, g)
    s_aa = e_aa - mu_a**2
    s_bb = e_bb - mu_b**2
    s_ab = e_ab - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + SSIM_C1
    num2 = 2 * s_ab + SSIM_C2
    den1 = mu_a**2 + mu_b**2 + SSIM_C1
    den2 = s_aa + s_bb + SSIM_C2
    return a, b, g, (mu_a, mu_b, s_ab, num1, num2, den1, den2)


def ssim(a, b):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, data range 1), averaged over channels.

    Only windows lying fully inside the image are scored.
    """
    *_, (mu_a, mu_b, s_ab, num1, num2, den1, den2) = _ssim_parts(a, b)
    return float(np.mean((num1 * num2) / (den1 * den2)))


def ssim_grad(a, b):
    """SSIM(a, b) and its gradient with respect to ``a``."""
    shape = np.shape(a)
    a, b, g, (mu_a, mu_b, s_ab, num1, num2, den1, den2) = _ssim_parts(a, b)
    smap = (num1 * num2) / (den1 * den2)
    n = smap.size
    # d mean / d map = 1/n ; derivatives w.r.t. mu_a, e_aa, e_ab
    d_num1 = num2 / (den1 * den2) / n
    d_num2 = num1 / (den1 * den2) / n
    d_den1 = -smap / den1 / n
    d_den2 = -smap / den2 / n
    # num1 = 2 mu_a mu_b ; num2 = 2 (e_ab - mu_a mu_b) ; den1 = mu_a^2 + mu_b^2 ; den2 = e_aa - mu_a^2 + s_bb
    g_mu_a = d_num1 * 2 * mu_b - d_num2 * 2 * mu_b + d_den1 * 2 * mu_a - d_den2 * 2 * mu_a
    g_e_aa = d_den2
    g_e_ab = 2 * d_num2
    grad = (_filter_valid_adjoint(g_mu_a, g) + 2 * a * _filter_valid_adjoint(g_e_aa, g)
            + b * _filter_valid_adjoint(g_e_ab, g))
    return float(np.mean(smap)), grad.reshape(shape)


def photometric_loss(rendered, target, lambda_1=0.8):
    """lambda_1 * mean |rendered - target| + (1 - lambda_1) * (1 - SSIM)."""
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise StructuralError(f"image shapes {rendered.shape} and {target.shape} differ")
    l1 = np.mean(np.abs(rendered - target))
    return float(lambda_1 * l1 + (1.0 - lambda_1) * (1.0 - ssim(rendered, target)))


def photometric_loss_grad(rendered, target, lambda_1=0.8):
    """Loss value and its gradient with respect to the rendered image."""
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise StructuralError(f"image shapes {rendered.shape} and {target.shape} differ")
    diff = rendered - target
    l1 = np.mean(np.abs(diff))
    s, ds = ssim_grad(rendered, target)
    loss = lambda_1 * l1 + (1.0 - lambda_1) * (1.0 - s)
    grad = lambda_1 * np.sign(diff) / diff.size - (1.0 - lambda_1) * ds
    return float(loss), grad
