import json
import logging

import numpy as np
import pytest

from splatgrasp import io
from splatgrasp.errors import FormatError, StructuralError, ValidationError
from splatgrasp.hand_rig import HandPose
from splatgrasp.rasterizer import Camera
from splatgrasp.rotations import axis_angle_to_matrix
from splatgrasp.splat_binding import GaussianSet
from splatgrasp.synthetic import orbit_cameras

from conftest import random_gaussians

PROPS = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
         "rot_0", "rot_1", "rot_2", "rot_3")


def write_ply(path, rows, props=PROPS, fmt="binary_little_endian"):
    rows = np.asarray(rows, dtype="<f4").reshape(-1, len(props))
    head = ["ply", f"format {fmt} 1.0", f"element vertex {len(rows)}"]
    head += [f"property float {p}" for p in props] + ["end_header"]
    path.write_bytes(("\n".join(head) + "\n").encode() + rows.tobytes())


def test_ply_activation_conventions(tmp_path):
    p = tmp_path / "g.ply"
    write_ply(p, [[0.1, 0.2, 0.3, 0, 0, 0, 0.0, 0, 0, 0, 2.0, 0, 0, 0]])
    g = io.load_gaussian_ply(p)
    assert g.opacities[0] == pytest.approx(0.5)
    np.testing.assert_allclose(g.scales, 1.0)
    np.testing.assert_allclose(g.colors, 0.5)
    np.testing.assert_allclose(g.orientations, [[1, 0, 0, 0]])


def test_ply_round_trip(tmp_path):
    g = random_gaussians(np.random.default_rng(0), 50)
    io.save_gaussian_ply(g, tmp_path / "g.ply")
    back = io.load_gaussian_ply(tmp_path / "g.ply")
    for name in ("positions", "scales", "opacities", "colors"):
        np.testing.assert_allclose(getattr(back, name), getattr(g, name), rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(np.abs(np.sum(back.orientations * g.orientations, 1)), 1.0, atol=1e-6)


def test_ply_color_half_is_zero_dc(tmp_path):
    g = GaussianSet([[0, 0, 0]], [[1.0, 0, 0, 0]], [[0.1] * 3], [0.5], [[0.5, 0.5, 0.5]])
    io.save_gaussian_ply(g, tmp_path / "g.ply")
    raw = np.frombuffer((tmp_path / "g.ply").read_bytes().split(b"end_header\n")[1], "<f4")
    np.testing.assert_array_equal(raw[3:6], 0.0)


def test_ply_empty_set(tmp_path):
    io.save_gaussian_ply(GaussianSet.empty(), tmp_path / "e.ply")
    assert len(io.load_gaussian_ply(tmp_path / "e.ply")) == 0


def test_ply_errors(tmp_path):
    p = tmp_path / "bad.ply"
    write_ply(p, np.zeros((2, 13)), props=PROPS[1:])
    with pytest.raises(FormatError, match="'x'"):
        io.load_gaussian_ply(p)
    rows = np.zeros((3, 14))
    rows[:, 10] = 1.0
    rows[2, 4] = np.nan
    write_ply(p, rows)
    with pytest.raises(FormatError, match="element 2"):
        io.load_gaussian_ply(p)
    write_ply(p, np.zeros((1, 14)), fmt="ascii")
    with pytest.raises(FormatError, match="binary_little_endian"):
        io.load_gaussian_ply(p)
    p.write_bytes(b"not a ply")
    with pytest.raises(FormatError):
        io.load_gaussian_ply(p)


def test_bundled_rig_round_trip(tmp_path, rig):
    bundled = io.load_bundled_rig()
    np.testing.assert_array_equal(bundled.faces, rig.faces)
    np.testing.assert_allclose(bundled.template_vertices, rig.template_vertices)
    io.save_rig(rig, tmp_path / "rig.json")
    back = io.load_rig(tmp_path / "rig.json")
    np.testing.assert_array_equal(back.skinning_weights, rig.skinning_weights)
    assert all(np.array_equal(a, b) for a, b in zip(back.fingertip_groups, rig.fingertip_groups))


def test_rig_mesh_from_obj(tmp_path, rig):
    doc = io.rig_to_dict(rig)
    io.save_obj(tmp_path / "hand.obj", rig.template_vertices, rig.faces)
    doc["mesh"] = {"obj": "hand.obj"}
    (tmp_path / "rig.json").write_text(json.dumps(doc))
    back = io.load_rig(tmp_path / "rig.json")
    np.testing.assert_array_equal(back.template_vertices, rig.template_vertices)


def _rig_doc(rig, tmp_path, edit):
    doc = io.rig_to_dict(rig)
    edit(doc)
    p = tmp_path / "rig.json"
    p.write_text(json.dumps(doc))
    return p


def test_rig_errors(tmp_path, rig):
    def cycle(d):
        d["joints"]["parent_index"][2] = 3
        d["joints"]["parent_index"][3] = 2

    with pytest.raises(ValidationError, match="cycle"):
        io.load_rig(_rig_doc(rig, tmp_path, cycle))
    with pytest.raises(FormatError, match="joints.rest_positions"):
        io.load_rig(_rig_doc(rig, tmp_path, lambda d: d["joints"].pop("rest_positions")))
    with pytest.raises(FormatError, match="fingertip_groups.ring"):
        io.load_rig(_rig_doc(rig, tmp_path, lambda d: d["fingertip_groups"].pop("ring")))

    def off(d):
        d["skinning_weights"][7][0] += 0.01

    with pytest.raises(ValidationError, match="row 7"):
        io.load_rig(_rig_doc(rig, tmp_path, off))
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(FormatError, match="invalid JSON"):
        io.load_rig(tmp_path / "broken.json")


def test_rig_small_weight_error_is_renormalized(tmp_path, rig, caplog):
    def nudge(d):
        d["skinning_weights"][4] = [w * 1.00005 for w in d["skinning_weights"][4]]

    with caplog.at_level(logging.WARNING, logger="splatgrasp"):
        back = io.load_rig(_rig_doc(rig, tmp_path, nudge))
    assert "renormalized 1" in caplog.text
    assert back.skinning_weights[4].sum() == pytest.approx(1.0, abs=1e-12)


def test_pose_round_trip_and_tolerance(tmp_path):
    rng = np.random.default_rng(0)
    pose = HandPose(axis_angle_to_matrix(rng.normal(size=3)), rng.normal(size=3),
                    axis_angle_to_matrix(rng.normal(size=(21, 3))))
    io.save_pose(pose, tmp_path / "p.json")
    back = io.load_pose(tmp_path / "p.json")
    np.testing.assert_allclose(back.global_rotation, pose.global_rotation, atol=1e-14)
    np.testing.assert_array_equal(back.translation, pose.translation)
    np.testing.assert_allclose(back.joint_rotations, pose.joint_rotations, atol=1e-14)

    doc = io.pose_to_dict(pose)
    doc["global_rotation"][0] += 1e-5
    R = io.pose_from_dict(doc).global_rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    doc["global_rotation"][0] += 1e-2
    with pytest.raises(ValidationError, match="global_rotation"):
        io.pose_from_dict(doc)
    doc = io.pose_to_dict(pose)
    doc["joint_rotations"][3] = (-np.eye(3)).reshape(-1).tolist()
    with pytest.raises(ValidationError, match=r"joint_rotations\[3\]"):
        io.pose_from_dict(doc)
    doc["joint_rotations"] = doc["joint_rotations"][:20]
    with pytest.raises(StructuralError):
        io.pose_from_dict(doc)


@pytest.mark.parametrize("suffix,tol", [(".png", 0.5 / 255), (".ppm", 0.5 / 255), (".npy", 0.0)])
def test_image_round_trip(tmp_path, suffix, tol):
    img = np.random.default_rng(1).uniform(size=(9, 13, 3))
    io.save_image(img, tmp_path / f"im{suffix}")
    back = io.load_image(tmp_path / f"im{suffix}")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= tol + 1e-12


def test_viewpoints_round_trip(tmp_path):
    cams = orbit_cameras(size=16, count=2)
    cams.append(Camera(20.0, 20.0, 8.0, 8.0, 16, 16))
    for i in range(3):
        io.save_image(np.full((16, 16, 3), 0.1 * i), tmp_path / f"t{i}.npy")
    io.save_viewpoints(tmp_path / "views.json", cams, [f"t{i}.npy" for i in range(3)], seed=7)
    vs = io.load_viewpoints(tmp_path / "views.json")
    assert vs.seed == 7 and len(vs.cameras) == 3
    np.testing.assert_array_equal(vs.cameras[2].world_to_camera, np.eye(4))
    for a, b in zip(vs.cameras, cams):
        np.testing.assert_array_equal(a.world_to_camera, b.world_to_camera)
        assert (a.fx, a.cy, a.width) == (b.fx, b.cy, b.width)
    np.testing.assert_array_equal(vs.targets[1], 0.1)
    assert io.load_viewpoints(tmp_path / "views.json", seed=3).seed == 3


def test_viewpoint_errors(tmp_path):
    cam = Camera(20.0, 20.0, 8.0, 8.0, 16, 16)
    io.save_viewpoints(tmp_path / "v.json", [cam])
    with pytest.raises(ValidationError, match="camera 0 has no target"):
        io.load_viewpoints(tmp_path / "v.json")
    io.save_image(np.zeros((8, 16, 3)), tmp_path / "small.npy")
    io.save_viewpoints(tmp_path / "v.json", [cam], ["small.npy"])
    with pytest.raises(ValidationError, match="16x8"):
        io.load_viewpoints(tmp_path / "v.json")
    doc = io.camera_to_dict(cam)
    doc["world_to_camera"] = [0.0] * 16
    with pytest.raises(ValidationError, match="invertible"):
        io.camera_from_dict(doc)
    io.write_json(tmp_path / "v.json", {"cameras": []})
    with pytest.raises(ValidationError, match="no cameras"):
        io.load_viewpoints(tmp_path / "v.json")


def test_binding_round_trip(tmp_path, rig, binding):
    io.save_binding(binding, rig.num_faces, tmp_path / "b.bin")
    back = io.load_binding(tmp_path / "b.bin", num_gaussians=len(binding), num_faces=rig.num_faces)
    np.testing.assert_array_equal(back.face_index, binding.face_index)
    np.testing.assert_array_equal(back.local_orientation, binding.local_orientation)
    np.testing.assert_array_equal(back.canonical_scale, binding.canonical_scale)
    with pytest.raises(ValidationError, match="faces"):
        io.load_binding(tmp_path / "b.bin", num_faces=rig.num_faces + 1)
    with pytest.raises(ValidationError, match="Gaussians"):
        io.load_binding(tmp_path / "b.bin", num_gaussians=3)
    raw = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="bytes"):
        io.load_binding(tmp_path / "t.bin")
    (tmp_path / "t.bin").write_bytes(b"XX" + raw[2:])
    with pytest.raises(FormatError, match="not a binding"):
        io.load_binding(tmp_path / "t.bin")


def test_obj_round_trip(tmp_path):
    V = np.random.default_rng(2).normal(size=(5, 3))
    F = np.array([[0, 1, 2], [2, 3, 4]])
    io.save_obj(tmp_path / "m.obj", V, F)
    V2, F2 = io.load_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(V2, V)
    np.testing.assert_array_equal(F2, F)
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    np.testing.assert_array_equal(io.load_obj(tmp_path / "q.obj")[1], [[0, 1, 2], [0, 2, 3]])
    (tmp_path / "bad.obj").write_text("v 0 0 0\nf 1 2 3\n")
    with pytest.raises(FormatError, match="out of range"):
        io.load_obj(tmp_path / "bad.obj")


def test_config_loading(tmp_path):
    (tmp_path / "rig.json").write_text(json.dumps(io.rig_to_dict(io.load_bundled_rig())))
    doc = {"rig": "rig.json", "background": [0.1, 0.2, 0.3], "refine": {"max_iterations": 7},
           "loss_weights": {"lambda_1": 0.6}, "grasp": {"contact_eps": 0.004}, "seed": 4}
    io.write_json(tmp_path / "c.json", doc)
    cfg = io.load_config(tmp_path / "c.json")
    assert cfg.rig == tmp_path / "rig.json"
    assert cfg.refine.max_iterations == 7 and cfg.refine.lambda_1 == 0.6
    assert cfg.refine.background == (0.1, 0.2, 0.3)
    assert cfg.contact_eps == 0.004 and cfg.penetration_limit == 0.002 and cfg.seed == 4
    assert len(cfg.load_object()) == 0

    for bad, exc in (({"rig": "missing.json"}, FileNotFoundError),
                     ({"refine": {"step": 1}}, ValidationError),
                     ({"refine": {"lr_rotation": -1.0}}, ValidationError),
                     ({"loss_weights": {"lambda_x": 1.0}}, ValidationError),
                     ({"loss_weights": {"lambda_verts": -1.0}}, ValidationError),
                     ({"grasp": {"contact_eps": -1.0}}, ValidationError)):
        io.write_json(tmp_path / "c.json", bad)
        with pytest.raises(exc):
            io.load_config(tmp_path / "c.json")


def test_write_json_is_stable(tmp_path):
    io.write_json(tmp_path / "a.json", {"b": [1, 2], "a": 0.1})
    assert (tmp_path / "a.json").read_text() == '{\n  "b": [\n    1,\n    2\n  ],\n  "a": 0.1\n}\n'
