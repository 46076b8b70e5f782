"""Writes a self-contained synthetic project for trying the CLI."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import io
from .refiner import render_hand_scene
from .rotations import axis_angle_to_matrix
from .splat_binding import bind_gaussians
from .synthetic import (box_object_gaussians, build_toy_rig, grasp_pose, orbit_cameras,
                        sample_hand_gaussians, unit_box_mesh)

OBJECT_CENTER = (0.035, 0.1075, 0.05)
OBJECT_SIZE = (0.09, 0.075, 0.04)


def write_demo_project(directory, size=128, views=4, seed=0):
    """Rig, Gaussians, cameras, target renders, poses and a config file.

    ``truth_pose.json`` renders the targets; ``init_pose.json`` is the same
    grasp rotated 5 degrees about a random axis and shifted by 1 cm.
    Returns the config path.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rig = build_toy_rig()
    hand = sample_hand_gaussians(rig, seed=seed)
    # box held between thumb and index fingertip at the ground-truth grasp
    obj = box_object_gaussians(center=OBJECT_CENTER, size=OBJECT_SIZE)
    truth = grasp_pose()
    cams = orbit_cameras(size=size, count=views)

    io.save_rig(rig, d / "rig.json")
    io.save_gaussian_ply(hand, d / "hand.ply")
    io.save_gaussian_ply(obj, d / "object.ply")
    # render targets from the stored float32 values so the truth pose is an exact fixed point
    rig = io.load_rig(d / "rig.json")
    binding = bind_gaussians(io.load_gaussian_ply(d / "hand.ply"), rig)
    obj = io.load_gaussian_ply(d / "object.ply")
    names = []
    for i, cam in enumerate(cams):
        img, _ = render_hand_scene(truth, rig, binding, obj, cam)
        names.append(f"target_{i}.npy")
        io.save_image(img.pixels, d / names[-1])
    io.save_viewpoints(d / "views.json", cams, names, seed=seed)

    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    shift = rng.normal(size=3)
    init = truth.replace(
        global_rotation=axis_angle_to_matrix(axis / np.linalg.norm(axis) * np.radians(5.0)) @ truth.global_rotation,
        translation=truth.translation + 0.01 * shift / np.linalg.norm(shift))
    io.save_pose(truth, d / "truth_pose.json")
    io.save_pose(init, d / "init_pose.json")
    V, F = unit_box_mesh(center=OBJECT_CENTER, size=OBJECT_SIZE, subdivisions=3)
    io.save_obj(d / "object.obj", V, F)
    config = {
        "rig": "rig.json",
        "hand_gaussians": "hand.ply",
        "object_gaussians": "object.ply",
        "viewpoints": "views.json",
        "background": [0.0, 0.0, 0.0],
        "refine": {"max_iterations": 300},
        "grasp": {"contact_eps": 0.005, "penetration_limit": 0.002},
        "seed": seed,
    }
    io.write_json(d / "project.json", config)
    return d / "project.json"
