import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatgrasp.errors import StructuralError, ValidationError
from splatgrasp.hand_rig import (NUM_JOINTS, HandPose, HandRig, NormStats, denormalize_translation,
                                 forward_kinematics, forward_kinematics_vjp, normalize_translation, pose_mesh,
                                 skin_mesh, skin_mesh_vjp, tangent_gradient)
from splatgrasp.rotations import axis_angle_to_matrix, random_rotation, rot_x, rot_z

from conftest import central_difference


def chain_rig(weights=None):
    """Joint 1 hangs 5 cm above the root; the remaining joints continue the chain."""
    parents = np.array([-1] + list(range(NUM_JOINTS - 1)))
    J = np.zeros((NUM_JOINTS, 3))
    J[:, 1] = 0.05 * np.arange(NUM_JOINTS)
    V = np.array([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [0.0, 0.05, 0.0], [0.01, 0.05, 0.0], [0.0, 0.1, 0.01]])
    F = np.array([[0, 1, 2], [1, 3, 2], [2, 3, 4]])
    if weights is None:
        weights = np.zeros((5, NUM_JOINTS))
        weights[:, 0] = 1.0
    return HandRig(V, F, parents, J, weights, ([0], [1], [2], [3], [4]))


def rigid(R, t):
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def random_pose(rng, scale=0.4):
    h = axis_angle_to_matrix(scale * rng.normal(size=(NUM_JOINTS, 3)))
    return HandPose(random_rotation(rng), 0.1 * rng.normal(size=3), h)


def test_identity_pose_reproduces_rest(rig):
    states = forward_kinematics(rig, HandPose.identity())
    assert np.array_equal(states.joint_positions, rig.rest_joint_positions)
    np.testing.assert_allclose(skin_mesh(rig, states), rig.template_vertices, atol=1e-9)


def test_pure_translation(rig):
    t = np.array([0.1, 0.0, 0.0])
    states, verts = pose_mesh(rig, HandPose.identity().replace(translation=t))
    np.testing.assert_allclose(states.joint_positions, rig.rest_joint_positions + t, atol=1e-15)
    np.testing.assert_allclose(verts, rig.template_vertices + t, atol=1e-12)


def test_two_joint_composition_by_hand():
    rig = chain_rig()
    h = np.tile(np.eye(3), (NUM_JOINTS, 1, 1))
    h[0] = rot_z(np.pi / 2)
    states = forward_kinematics(rig, HandPose(np.eye(3), np.zeros(3), h))
    # root transform, then the child's local transform (offset (0, 0.05, 0), identity rotation)
    G1 = rigid(rot_z(np.pi / 2), [0, 0, 0]) @ rigid(np.eye(3), [0, 0.05, 0])
    np.testing.assert_allclose(states.global_transforms[1], G1, atol=1e-15)
    np.testing.assert_allclose(states.joint_positions[1], [-0.05, 0.0, 0.0], atol=1e-15)


def test_single_joint_vertex_follows_joint():
    W = np.zeros((5, NUM_JOINTS))
    W[:, 0] = 1.0
    W[4] = 0.0
    W[4, 1] = 1.0
    rig = chain_rig(W)
    h = np.tile(np.eye(3), (NUM_JOINTS, 1, 1))
    h[1] = rot_x(np.pi / 2)
    states, verts = pose_mesh(rig, HandPose(np.eye(3), np.zeros(3), h))
    # rigid motion of joint 1 relative to its rest frame
    A = states.global_transforms[1] @ np.linalg.inv(rigid(np.eye(3), rig.rest_joint_positions[1]))
    expected = (A @ np.append(rig.template_vertices[4], 1.0))[:3]
    np.testing.assert_allclose(verts[4], expected, atol=1e-15)
    # offset (0, 0.05, 0.01) from joint 1 turns into (0, -0.01, 0.05)
    np.testing.assert_allclose(verts[4], [0.0, 0.04, 0.05], atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_equivariance_and_bone_lengths(rig, seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    R, s = random_rotation(rng), rng.normal(size=3)
    states, verts = pose_mesh(rig, pose)
    moved_states, moved_verts = pose_mesh(rig, pose.rigidly_moved(R, s))
    np.testing.assert_allclose(moved_states.joint_positions, states.joint_positions @ R.T + s, atol=1e-9)
    np.testing.assert_allclose(moved_verts, verts @ R.T + s, atol=1e-9)
    par = rig.parent_index[1:]
    rest = np.linalg.norm(rig.rest_joint_positions[1:] - rig.rest_joint_positions[par], axis=1)
    posed = np.linalg.norm(states.joint_positions[1:] - states.joint_positions[par], axis=1)
    np.testing.assert_allclose(posed, rest, atol=1e-9)


def test_joint_positions_are_transform_translations(rig):
    states = forward_kinematics(rig, random_pose(np.random.default_rng(1)))
    assert np.array_equal(states.global_transforms[:, :3, 3], states.joint_positions)


def test_pose_validation():
    with pytest.raises(ValidationError):
        HandPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3), np.tile(np.eye(3), (21, 1, 1)))
    with pytest.raises(ValidationError):
        HandPose(np.eye(3) * 1.001, np.zeros(3), np.tile(np.eye(3), (21, 1, 1)))
    with pytest.raises(StructuralError):
        HandPose(np.eye(3), np.zeros(3), np.tile(np.eye(3), (20, 1, 1)))
    with pytest.raises(StructuralError):
        HandPose(np.eye(3), np.zeros(2), np.tile(np.eye(3), (21, 1, 1)))


def test_rig_validation(rig):
    base = dict(template_vertices=rig.template_vertices, faces=rig.faces, parent_index=rig.parent_index,
                rest_joint_positions=rig.rest_joint_positions, skinning_weights=rig.skinning_weights,
                fingertip_groups=rig.fingertip_groups)
    cyc = rig.parent_index.copy()
    cyc[1], cyc[2] = 2, 1
    with pytest.raises(ValidationError, match="cycle"):
        HandRig(**{**base, "parent_index": cyc})
    W = rig.skinning_weights.copy()
    W[0, 0] += 0.01
    with pytest.raises(ValidationError, match="skinning_weights"):
        HandRig(**{**base, "skinning_weights": W})
    F = rig.faces.copy()
    F[0, 0] = rig.num_vertices
    with pytest.raises(ValidationError, match="faces"):
        HandRig(**{**base, "faces": F})
    groups = list(rig.fingertip_groups)
    groups[1] = groups[0]
    with pytest.raises(ValidationError, match="overlaps"):
        HandRig(**{**base, "fingertip_groups": tuple(groups)})
    groups[1] = []
    with pytest.raises(ValidationError, match="empty"):
        HandRig(**{**base, "fingertip_groups": tuple(groups)})


def test_toy_rig_conventions(rig):
    assert rig.parent_index[0] == -1
    # wrist, then thumb..pinky with 4 joints each
    for finger in range(5):
        first = 1 + 4 * finger
        assert rig.parent_index[first] == 0
        assert list(rig.parent_index[first + 1:first + 4]) == [first, first + 1, first + 2]


def test_translation_normalization():
    stats = NormStats(mean=[0.1, -0.2, 0.3], std=[0.5, 1.0, 2.0])
    np.testing.assert_array_equal(denormalize_translation(np.zeros(3), stats), stats.mean)
    np.testing.assert_array_equal(
        denormalize_translation(np.ones(3), NormStats(np.zeros(3), [2.0, 2.0, 2.0])), [2.0, 2.0, 2.0])
    t = np.array([0.123, -4.5, 6.7])
    np.testing.assert_allclose(denormalize_translation(normalize_translation(t, stats), stats), t, atol=1e-12)
    with pytest.raises(ValidationError):
        NormStats(np.zeros(3), [1.0, 0.0, 1.0])


def test_skin_and_fk_vjp_match_finite_differences(rig):
    rng = np.random.default_rng(7)
    pose = random_pose(rng, 0.3)
    G = rng.normal(size=(rig.num_vertices, 3))

    def loss(p):
        return float(np.sum(G * pose_mesh(rig, p)[1]))

    states = forward_kinematics(rig, pose)
    gR, gp = skin_mesh_vjp(rig, G)
    gY, gt, gh = forward_kinematics_vjp(rig, pose, states, gR, gp)

    fd_t = central_difference(lambda t: loss(pose.replace(translation=t)), pose.translation, 1e-6)
    np.testing.assert_allclose(gt, fd_t, rtol=1e-6, atol=1e-9)

    def perturbed(R, d):
        return R @ axis_angle_to_matrix(d)

    fd_Y = central_difference(lambda d: loss(pose.replace(global_rotation=perturbed(pose.global_rotation, d))),
                              np.zeros(3), 1e-6)
    np.testing.assert_allclose(tangent_gradient(pose.global_rotation, gY), fd_Y, rtol=1e-6, atol=1e-9)
    for j in (0, 3, 14):
        def lj(d, j=j):
            h = pose.joint_rotations.copy()
            h[j] = perturbed(h[j], d)
            return loss(pose.replace(joint_rotations=h))
        fd = central_difference(lj, np.zeros(3), 1e-6)
        np.testing.assert_allclose(tangent_gradient(pose.joint_rotations[j], gh[j]), fd, rtol=1e-6, atol=1e-9)
