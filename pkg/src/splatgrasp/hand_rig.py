"""Articulated hand: kinematic tree, forward kinematics and linear blend skinning.

Joint order is wrist (0) followed by thumb, index, middle, ring and pinky with
four joints each. The root transform applies the global rotation about the
world origin, then the translation:

    G_0 = [Y h_0 | Y J_0 + t]
    G_j = G_parent(j) . [h_j | J_j - J_parent(j)]

so a rigid change (Y, t) -> (R Y, R t + s) moves every joint and vertex by
(R, s).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError, ValidationError
from .rotations import check_rotation

logger = logging.getLogger(__name__)

NUM_JOINTS = 21
FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")


@dataclass(frozen=True)
class HandPose:
    global_rotation: np.ndarray
    translation: np.ndarray
    joint_rotations: np.ndarray

    def __post_init__(self):
        Y = np.asarray(self.global_rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        h = np.asarray(self.joint_rotations, dtype=float)
        if Y.shape != (3, 3):
            raise StructuralError(f"global_rotation must be 3x3, got {Y.shape}")
        if t.shape != (3,):
            raise StructuralError(f"translation must be a 3-vector, got {t.shape}")
        if h.shape != (NUM_JOINTS, 3, 3):
            raise StructuralError(f"joint_rotations must be {NUM_JOINTS}x3x3, got {h.shape}")
        if not np.all(np.isfinite(t)):
            raise ValidationError("translation has non-finite entries")
        check_rotation(Y, name="global_rotation")
        check_rotation(h, name="joint_rotations")
        object.__setattr__(self, "global_rotation", Y)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "joint_rotations", h)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), np.tile(np.eye(3), (NUM_JOINTS, 1, 1)))

    def replace(self, **changes):
        fields = dict(global_rotation=self.global_rotation,
                      translation=self.translation,
                      joint_rotations=self.joint_rotations)
        fields.update(changes)
        return HandPose(**fields)

    def rigidly_moved(self, R, s):
        """Pose whose joints and vertices are those of self moved by x -> R x + s."""
        return HandPose(np.asarray(R) @ self.global_rotation,
                        np.asarray(R) @ self.translation + np.asarray(s),
                        self.joint_rotations)


def _topological_order(parent_index):
    n = len(parent_index)
    children = [[] for _ in range(n)]
    for j in range(1, n):
        p = parent_index[j]
        if not 0 <= p < n or p == j:
            raise ValidationError(f"parent_index[{j}] = {p} is out of range")
        children[p].append(j)
    order, stack = [], [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        raise ValidationError("parent_index contains a cycle or a disconnected joint")
    return np.array(order, dtype=int)


@dataclass(frozen=True, eq=False)
class HandRig:
    template_vertices: np.ndarray
    faces: np.ndarray
    parent_index: np.ndarray
    rest_joint_positions: np.ndarray
    skinning_weights: np.ndarray
    fingertip_groups: tuple
    order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        V = np.asarray(self.template_vertices, dtype=float)
        F = np.asarray(self.faces, dtype=np.int64)
        P = np.asarray(self.parent_index, dtype=np.int64)
        J = np.asarray(self.rest_joint_positions, dtype=float)
        W = np.asarray(self.skinning_weights, dtype=float)
        groups = tuple(np.asarray(g, dtype=np.int64) for g in self.fingertip_groups)

        if V.ndim != 2 or V.shape[1] != 3:
            raise StructuralError(f"template_vertices must be Nx3, got {V.shape}")
        if F.ndim != 2 or F.shape[1] != 3:
            raise StructuralError(f"faces must be Fx3, got {F.shape}")
        if P.shape != (NUM_JOINTS,):
            raise StructuralError(f"parent_index must have {NUM_JOINTS} entries")
        if J.shape != (NUM_JOINTS, 3):
            raise StructuralError(f"rest_joint_positions must be {NUM_JOINTS}x3")
        if W.shape != (V.shape[0], NUM_JOINTS):
            raise StructuralError(f"skinning_weights must be {V.shape[0]}x{NUM_JOINTS}, got {W.shape}")
        if len(groups) != 5:
            raise StructuralError("fingertip_groups must contain 5 groups")
        if F.size and (F.min() < 0 or F.max() >= len(V)):
            raise ValidationError("faces reference vertices out of range")
        if np.any(W < 0):
            raise ValidationError("skinning_weights must be non-negative")
        row_err = np.max(np.abs(W.sum(axis=1) - 1.0)) if len(W) else 0.0
        if row_err > 1e-6:
            raise ValidationError(f"skinning_weights rows must sum to 1 (max error {row_err:.3g})")
        seen = set()
        for name, g in zip(FINGER_NAMES, groups):
            if g.size == 0:
                raise ValidationError(f"fingertip group '{name}' is empty")
            if g.min() < 0 or g.max() >= len(V):
                raise ValidationError(f"fingertip group '{name}' has out-of-range indices")
            if seen.intersection(g.tolist()):
                raise ValidationError(f"fingertip group '{name}' overlaps another group")
            seen.update(g.tolist())
        order = _topological_order(P.tolist())

        object.__setattr__(self, "template_vertices", V)
        object.__setattr__(self, "faces", F)
        object.__setattr__(self, "parent_index", P)
        object.__setattr__(self, "rest_joint_positions", J)
        object.__setattr__(self, "skinning_weights", W)
        object.__setattr__(self, "fingertip_groups", groups)
        object.__setattr__(self, "order", order)

    @property
    def num_vertices(self):
        return len(self.template_vertices)

    @property
    def num_faces(self):
        return len(self.faces)

    def bone_offsets(self):
        """Rest offset of each joint from its parent (row 0 is the rest wrist)."""
        J = self.rest_joint_positions
        offsets = J - J[np.maximum(self.parent_index, 0)]
        offsets[0] = J[0]
        return offsets


@dataclass(frozen=True)
class JointStates:
    rotations: np.ndarray  # (21, 3, 3)
    joint_positions: np.ndarray  # (21, 3)

    @property
    def global_transforms(self):
        G = np.zeros((NUM_JOINTS, 4, 4))
        G[:, :3, :3] = self.rotations
        G[:, :3, 3] = self.joint_positions
        G[:, 3, 3] = 1.0
        return G


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != (3,) or std.shape != (3,):
            raise StructuralError("NormStats mean and std must be 3-vectors")
        if np.any(~(std > 0)):
            raise ValidationError("NormStats std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def forward_kinematics(rig: HandRig, pose: HandPose) -> JointStates:
    offsets = rig.bone_offsets()
    R = np.empty((NUM_JOINTS, 3, 3))
    p = np.empty((NUM_JOINTS, 3))
    Y, h = pose.global_rotation, pose.joint_rotations
    R[0] = Y @ h[0]
    p[0] = Y @ offsets[0] + pose.translation
    for j in rig.order[1:]:
        par = rig.parent_index[j]
        R[j] = R[par] @ h[j]
        p[j] = R[par] @ offsets[j] + p[par]
    return JointStates(R, p)


def skinning_transforms(rig: HandRig, states: JointStates):
    """Per-joint 3x4 matrices G_j . inv(rest G_j); rest rotations are identity."""
    A = np.empty((NUM_JOINTS, 3, 4))
    A[:, :, :3] = states.rotations
    A[:, :, 3] = states.joint_positions - np.einsum("jab,jb->ja", states.rotations,
                                                     rig.rest_joint_positions)
    return A


def skin_mesh(rig: HandRig, states: JointStates) -> np.ndarray:
    if states.rotations.shape != (NUM_JOINTS, 3, 3):
        raise StructuralError("joint states do not match the rig")
    A = skinning_transforms(rig, states)
    # blend the transforms first: (N, 3, 4)
    blended = np.einsum("nj,jab->nab", rig.skinning_weights, A)
    V = rig.template_vertices
    return np.einsum("nab,nb->na", blended[:, :, :3], V) + blended[:, :, 3]


def pose_mesh(rig, pose):
    """Convenience: forward kinematics followed by skinning."""
    states = forward_kinematics(rig, pose)
    return states, skin_mesh(rig, states)


def skin_mesh_vjp(rig: HandRig, grad_vertices):
    """Gradient of skinned vertices w.r.t. joint rotations and joint positions."""
    V = rig.template_vertices
    Vh = np.concatenate([V, np.ones((len(V), 1))], axis=1)
    # dL/dA_j = sum_i w_ij g_i [v_i; 1]^T
    gA = np.einsum("nj,na,nb->jab", rig.skinning_weights, grad_vertices, Vh)
    grad_R = gA[:, :, :3] - np.einsum("ja,jb->jab", gA[:, :, 3], rig.rest_joint_positions)
    grad_p = gA[:, :, 3].copy()
    return grad_R, grad_p


def forward_kinematics_vjp(rig: HandRig, pose: HandPose, states: JointStates,
                           grad_R, grad_p):
    """Pull joint-level gradients back to (global_rotation, translation, joint_rotations).

    Returned gradients are Euclidean (w.r.t. matrix entries).
    """
    offsets = rig.bone_offsets()
    gR = np.array(grad_R, dtype=float, copy=True)
    gp = np.array(grad_p, dtype=float, copy=True)
    h = pose.joint_rotations
    gh = np.zeros_like(h)
    for j in rig.order[:0:-1]:
        par = rig.parent_index[j]
        R_par = states.rotations[par]
        gh[j] = R_par.T @ gR[j]
        gR[par] += gR[j] @ h[j].T + np.outer(gp[j], offsets[j])
        gp[par] += gp[j]
    Y = pose.global_rotation
    gh[0] = Y.T @ gR[0]
    gY = gR[0] @ h[0].T + np.outer(gp[0], offsets[0])
    return gY, gp[0].copy(), gh


def tangent_gradient(R, grad_R):
    """Gradient w.r.t. delta for the right perturbation R exp([delta]x)."""
    M = np.swapaxes(R, -1, -2) @ grad_R
    return np.stack([M[..., 2, 1] - M[..., 1, 2],
                     M[..., 0, 2] - M[..., 2, 0],
                     M[..., 1, 0] - M[..., 0, 1]], axis=-1)


def normalize_translation(t, stats: NormStats):
    return (np.asarray(t, dtype=float) - stats.mean) / stats.std


def denormalize_translation(t_n, stats: NormStats):
    if np.any(~(np.asarray(stats.std) > 0)):
        raise ValidationError("NormStats std must be strictly positive")
    return np.asarray(t_n, dtype=float) * stats.std + stats.mean
