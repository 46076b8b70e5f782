"""Render-and-compare refinement of a hand pose against target images.

Each iteration draws one viewpoint, renders the deformed hand together with
the object, scores it with the photometric loss and pushes the image gradient
back through rasterization, face-frame deformation, skinning and forward
kinematics. Rotations step in the tangent space at the current estimate
(R <- R exp([-step]x)) and are projected back onto SO(3).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DegenerateFaceError, ValidationError
from .hand_rig import (HandPose, forward_kinematics, forward_kinematics_vjp, skin_mesh,
                       skin_mesh_vjp, tangent_gradient)
from .losses import photometric_loss_grad
from .rasterizer import DEFAULT_CONFIG, Camera, RasterConfig, render, render_backward
from .rotations import axis_angle_to_matrix, matrix_to_quat, project_to_so3
from .splat_binding import BindingTable, GaussianSet, compose_scene, deform_arrays, deform_vjp

logger = logging.getLogger(__name__)


@dataclass
class ViewpointSet:
    cameras: List[Camera]
    targets: List[np.ndarray]
    seed: int = 0

    def __post_init__(self):
        if len(self.cameras) != len(self.targets):
            raise ValidationError("every camera needs exactly one target image")
        for i, (cam, img) in enumerate(zip(self.cameras, self.targets)):
            if np.shape(img) != (cam.height, cam.width, 3):
                raise ValidationError(
                    f"target {i} has shape {np.shape(img)}, camera expects {(cam.height, cam.width, 3)}")

    def __len__(self):
        return len(self.cameras)


@dataclass(frozen=True)
class RefineConfig:
    max_iterations: int = 300
    lr_rotation: float = 1e-2
    lr_translation: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    convergence_tol: float = 1e-6
    convergence_window: int = 20
    # stop as soon as the loss falls to this value; negative disables the check
    fixed_point_tol: float = 1e-6
    lambda_1: float = 0.8
    # the root joint rotation duplicates the global rotation (up to a
    # translation the optimizer also controls), so it is frozen by default
    optimize_root_joint: bool = False
    optimize_fingers: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    raster: RasterConfig = DEFAULT_CONFIG

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be at least 1")
        if self.lr_rotation < 0 or self.lr_translation < 0:
            raise ValidationError("learning rates must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValidationError("invalid Adam hyper-parameters")
        if not 0 <= self.lambda_1 <= 1:
            raise ValidationError("lambda_1 must lie in [0, 1]")
        if self.convergence_window < 1:
            raise ValidationError("convergence_window must be at least 1")


@dataclass
class RefineReport:
    final_pose: HandPose
    loss_trace: List[float]
    view_trace: List[int]
    per_view_loss: List[float]
    iterations: int
    converged: bool
    diverged: bool = False
    diagnostics: List[str] = field(default_factory=list)


def sample_viewpoint(views: ViewpointSet, iteration: int):
    """Uniform, reproducible pick of a (camera, target) pair for an iteration."""
    if len(views) == 0:
        raise ValidationError("viewpoint set is empty")
    idx = int(np.random.default_rng([int(views.seed), int(iteration)]).integers(len(views)))
    return idx, views.cameras[idx], views.targets[idx]


def render_hand_scene(pose: HandPose, rig, binding: BindingTable, obj: GaussianSet,
                      camera: Camera, background=(0.0, 0.0, 0.0), raster=DEFAULT_CONFIG):
    """Pose the hand, deform its Gaussians, add the object and render."""
    states = forward_kinematics(rig, pose)
    verts = skin_mesh(rig, states)
    pos, rot, scale = deform_arrays(binding, verts, rig.faces)
    hand = GaussianSet(pos, matrix_to_quat(rot), scale, binding.opacities, binding.colors)
    scene = compose_scene(hand, obj)
    img, aux = render(scene, camera, background, raster)
    return img, dict(states=states, verts=verts, scene=scene, aux=aux)


def photometric_pose_gradient(pose: HandPose, rig, binding, obj, camera, target,
                              lambda_1=0.8, background=(0.0, 0.0, 0.0), raster=DEFAULT_CONFIG):
    """Photometric loss and its gradient w.r.t. the pose.

    Returns (loss, grads) where grads holds Euclidean matrix gradients
    ``global_rotation``, ``joint_rotations``, the ``translation`` gradient and
    their tangent-space counterparts ``global_tangent`` (3,) and
    ``joint_tangent`` (21, 3).
    """
    img, ctx = render_hand_scene(pose, rig, binding, obj, camera, background, raster)
    loss, d_img = photometric_loss_grad(img.pixels, target, lambda_1)
    g = render_backward(ctx["aux"], ctx["scene"], camera, d_img)
    k = len(binding)
    g_verts = deform_vjp(binding, ctx["verts"], rig.faces, g.d_positions[:k],
                         g.d_rotations[:k], g.d_scales[:k])
    g_R, g_p = skin_mesh_vjp(rig, g_verts)
    gY, gt, gh = forward_kinematics_vjp(rig, pose, ctx["states"], g_R, g_p)
    grads = dict(global_rotation=gY, translation=gt, joint_rotations=gh,
                 global_tangent=tangent_gradient(pose.global_rotation, gY),
                 joint_tangent=tangent_gradient(pose.joint_rotations, gh))
    return loss, grads


class _Adam:
    def __init__(self, shape, beta1, beta2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def _apply_step(pose: HandPose, step_rot_global, step_trans, step_joints):
    Y = project_to_so3(pose.global_rotation @ axis_angle_to_matrix(-step_rot_global))
    h = project_to_so3(pose.joint_rotations @ axis_angle_to_matrix(-step_joints))
    return HandPose(Y, pose.translation - step_trans, h)


def _converged(trace, view_trace, window, tol):
    """No view beat its own earlier best by ``tol`` within the last ``window`` iterations.

    Losses of different views are not comparable, so each view is judged
    against its own history.
    """
    if len(trace) <= window:
        return False
    loss = np.asarray(trace)
    views = np.asarray(view_trace)
    for v in np.unique(views[-window:]):
        before = loss[:-window][views[:-window] == v]
        if len(before) == 0:
            return False
        if before.min() - loss[-window:][views[-window:] == v].min() >= tol:
            return False
    return True


def refine_pose(init: HandPose, rig, binding: BindingTable, obj: GaussianSet,
                views: ViewpointSet, config: RefineConfig = RefineConfig(),
                callback=None) -> RefineReport:
    if len(views) == 0:
        raise ValidationError("viewpoint set is empty")
    binding.check_faces(rig.num_faces)
    pose = init
    last_valid = init
    joint_mask = np.zeros((21, 1))
    if config.optimize_fingers:
        joint_mask[1:] = 1.0
    if config.optimize_root_joint:
        joint_mask[0] = 1.0
    adam_rot = _Adam(3, config.beta1, config.beta2, config.eps)
    adam_trans = _Adam(3, config.beta1, config.beta2, config.eps)
    adam_joint = _Adam((21, 3), config.beta1, config.beta2, config.eps)

    trace, view_trace, notes = [], [], []
    converged = diverged = False
    damping = 1.0
    for it in range(config.max_iterations):
        idx, cam, target = sample_viewpoint(views, it)
        try:
            loss, grads = photometric_pose_gradient(pose, rig, binding, obj, cam, target,
                                                    config.lambda_1, config.background, config.raster)
        except DegenerateFaceError as exc:
            notes.append(f"iteration {it}: {exc}; rolled back to the last valid pose")
            logger.warning(notes[-1])
            pose = last_valid
            damping *= 0.5
            continue
        if not np.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in grads.values()):
            notes.append(f"iteration {it}: non-finite loss or gradient")
            diverged = True
            break
        last_valid = pose
        trace.append(loss)
        view_trace.append(idx)
        if callback is not None:
            callback(it, pose, loss, idx)
        if loss <= config.fixed_point_tol or _converged(trace, view_trace, config.convergence_window,
                                                       config.convergence_tol):
            converged = True
            break
        if it == config.max_iterations - 1:
            break
        s_rot = config.lr_rotation * damping * adam_rot.step(grads["global_tangent"])
        s_trans = config.lr_translation * damping * adam_trans.step(grads["translation"])
        s_joint = config.lr_rotation * damping * adam_joint.step(grads["joint_tangent"] * joint_mask)
        pose = _apply_step(pose, s_rot, s_trans, s_joint)

    final = last_valid if diverged else pose
    per_view = []
    if not diverged:
        for cam, target in zip(views.cameras, views.targets):
            try:
                img, _ = render_hand_scene(final, rig, binding, obj, cam, config.background, config.raster)
                per_view.append(photometric_loss_grad(img.pixels, target, config.lambda_1)[0])
            except DegenerateFaceError as exc:
                notes.append(f"final evaluation: {exc}")
                per_view.append(float("nan"))
    return RefineReport(final, trace, view_trace, per_view, len(trace), converged, diverged, notes)
