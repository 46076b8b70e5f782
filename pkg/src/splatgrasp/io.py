"""Readers and writers for every on-disk artifact.

* Gaussian PLY: binary little-endian, 3DGS property names (log scales, logit
  opacity, wxyz ``rot_*``, degree-0 SH colour ``f_dc_*``).
* Rig, pose, viewpoint and project files: JSON.
* Meshes: Wavefront OBJ (``v`` and triangular ``f`` records).
* Images: 8-bit PNG, ASCII PPM (P3) or ``.npy`` float arrays (lossless).
* Binding tables: small binary format with a versioned header.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, SplatGraspError, StructuralError, ValidationError
from .hand_rig import FINGER_NAMES, NUM_JOINTS, HandPose, HandRig
from .losses import LossWeights
from .rasterizer import Camera
from .refiner import RefineConfig, ViewpointSet
from .rotations import project_to_so3
from .splat_binding import BindingTable, GaussianSet

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
OPACITY_CLAMP = 1e-6
WEIGHT_TOLERANCE = 1e-4
POSE_TOLERANCE = 1e-4

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_GAUSSIAN_PROPS = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                   "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


# --------------------------------------------------------------------- PLY

def _parse_ply_header(f, path):
    if f.readline().strip() != b"ply":
        raise FormatError(f"{path}: not a PLY file")
    fmt = None
    elements = []
    while True:
        line = f.readline()
        if not line:
            raise FormatError(f"{path}: header has no end_header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before any element")
            if tok[1] == "list":
                raise FormatError(f"{path}: list properties are not supported")
            if tok[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unknown property type '{tok[1]}'")
            elements[-1][2].append((tok[2], "<" + _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
    return elements


def load_gaussian_ply(path) -> GaussianSet:
    with open(path, "rb") as f:
        elements = _parse_ply_header(f, path)
        data = None
        for name, count, props in elements:
            dtype = np.dtype(props)
            raw = f.read(dtype.itemsize * count)
            if len(raw) != dtype.itemsize * count:
                raise FormatError(f"{path}: truncated '{name}' element data")
            if name == "vertex":
                data = np.frombuffer(raw, dtype=dtype, count=count)
                break
    if data is None:
        raise FormatError(f"{path}: no vertex element")
    for prop in _GAUSSIAN_PROPS:
        if prop not in data.dtype.names:
            raise FormatError(f"{path}: missing required property '{prop}'")
    cols = {p: data[p].astype(float) for p in _GAUSSIAN_PROPS}
    table = np.stack([cols[p] for p in _GAUSSIAN_PROPS], axis=1) if len(data) else np.zeros((0, 14))
    bad = np.flatnonzero(~np.all(np.isfinite(table), axis=1))
    if len(bad):
        raise FormatError(f"{path}: non-finite value in element {int(bad[0])}")
    pos = table[:, 0:3]
    colors = np.clip(0.5 + SH_C0 * table[:, 3:6], 0.0, 1.0)
    opac = 1.0 / (1.0 + np.exp(-table[:, 6]))
    scales = np.exp(table[:, 7:10])
    quat = table[:, 10:14]
    norms = np.linalg.norm(quat, axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise FormatError(f"{path}: zero quaternion in element {int(zero[0])}")
    quat = quat / norms[:, None]
    opac = np.clip(opac, OPACITY_CLAMP, 1 - OPACITY_CLAMP)
    return GaussianSet(pos, quat, scales, opac, colors)


def save_gaussian_ply(gaussians: GaussianSet, path):
    k = len(gaussians)
    opac = np.clip(gaussians.opacities, OPACITY_CLAMP, 1 - OPACITY_CLAMP)
    table = np.concatenate([
        gaussians.positions,
        (gaussians.colors - 0.5) / SH_C0,
        np.log(opac / (1 - opac))[:, None],
        np.log(gaussians.scales),
        gaussians.orientations,
    ], axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {k}"]
    header += [f"property float {p}" for p in _GAUSSIAN_PROPS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(table).tobytes())


# --------------------------------------------------------------------- OBJ

def load_obj(path):
    """Vertices and triangles of an OBJ file (polygons are fanned)."""
    verts, faces = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tok = line.split()
            if not tok:
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(x) for x in tok[1:4]])
                elif tok[0] == "f":
                    idx = [int(t.split("/")[0]) for t in tok[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for a, b in zip(idx[1:-1], idx[2:]):
                        faces.append([idx[0], a, b])
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed record") from exc
    V = np.array(verts, dtype=float).reshape(-1, 3)
    F = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if F.size and (F.min() < 0 or F.max() >= len(V)):
        raise FormatError(f"{path}: face index out of range")
    return V, F


def save_obj(path, vertices, faces=()):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in np.asarray(vertices, dtype=float)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=int).reshape(-1, 3)]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------- rig

def bundled_rig_path():
    return resources.files("splatgrasp") / "data" / "toy_hand_rig.json"


def load_bundled_rig() -> HandRig:
    with resources.as_file(bundled_rig_path()) as p:
        return load_rig(p)


def rig_to_dict(rig: HandRig):
    return {
        "format": "splatgrasp-rig",
        "version": 1,
        "mesh": {"vertices": rig.template_vertices.tolist(), "faces": rig.faces.tolist()},
        "joints": {"parent_index": rig.parent_index.tolist(),
                   "rest_positions": rig.rest_joint_positions.tolist()},
        "skinning_weights": rig.skinning_weights.tolist(),
        "fingertip_groups": {n: g.tolist() for n, g in zip(FINGER_NAMES, rig.fingertip_groups)},
    }


def save_rig(rig: HandRig, path):
    write_json(path, rig_to_dict(rig))


def _field(doc, dotted, path):
    node = doc
    for key in dotted.split("."):
        if not isinstance(node, dict) or key not in node:
            raise FormatError(f"{path}: missing field '{dotted}'")
        node = node[key]
    return node


def _array(value, dotted, path, dtype=float):
    try:
        return np.asarray(value, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: field '{dotted}' is not numeric") from exc


def load_rig(path) -> HandRig:
    path = Path(path)
    doc = _read_json(path)
    mesh = _field(doc, "mesh", path)
    if "obj" in mesh:
        V, F = load_obj(path.parent / mesh["obj"])
    else:
        V = _array(_field(doc, "mesh.vertices", path), "mesh.vertices", path)
        F = _array(_field(doc, "mesh.faces", path), "mesh.faces", path, np.int64)
    V = V.reshape(-1, 3) if V.size else np.zeros((0, 3))
    F = F.reshape(-1, 3) if F.size else np.zeros((0, 3), dtype=np.int64)
    parents = _array(_field(doc, "joints.parent_index", path), "joints.parent_index", path, np.int64)
    J = _array(_field(doc, "joints.rest_positions", path), "joints.rest_positions", path)
    W = _array(_field(doc, "skinning_weights", path), "skinning_weights", path)
    groups_doc = _field(doc, "fingertip_groups", path)
    if isinstance(groups_doc, dict):
        missing = [n for n in FINGER_NAMES if n not in groups_doc]
        if missing:
            raise FormatError(f"{path}: missing field 'fingertip_groups.{missing[0]}'")
        groups = [_array(groups_doc[n], f"fingertip_groups.{n}", path, np.int64) for n in FINGER_NAMES]
    else:
        groups = [_array(g, "fingertip_groups", path, np.int64) for g in groups_doc]

    if parents.shape != (NUM_JOINTS,):
        raise ValidationError(f"{path}: joints.parent_index must have {NUM_JOINTS} entries")
    if W.shape != (len(V), NUM_JOINTS):
        raise ValidationError(f"{path}: skinning_weights must be {len(V)}x{NUM_JOINTS}")
    if F.size and (F.min() < 0 or F.max() >= len(V)):
        raise ValidationError(f"{path}: mesh.faces reference vertices out of range")
    if np.any(W < 0):
        raise ValidationError(f"{path}: skinning_weights contain negative entries")
    err = np.abs(W.sum(axis=1) - 1.0)
    if np.any(err > WEIGHT_TOLERANCE):
        row = int(np.argmax(err))
        raise ValidationError(f"{path}: skinning_weights row {row} sums to {W[row].sum():.6g}")
    if np.any(err > 1e-6):
        logger.warning("%s: renormalized %d skinning weight rows", path, int(np.sum(err > 1e-6)))
        W = W / W.sum(axis=1, keepdims=True)
    try:
        return HandRig(V, F, parents, J, W, tuple(groups))
    except SplatGraspError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


# -------------------------------------------------------------------- pose

def _rotation(value, name, path):
    R = _array(value, name, path).reshape(-1)
    if R.size != 9:
        raise FormatError(f"{path}: field '{name}' must hold 9 numbers")
    R = R.reshape(3, 3)
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if err > POSE_TOLERANCE or np.linalg.det(R) <= 0:
        raise ValidationError(f"{path}: field '{name}' is not a rotation (error {err:.3g})")
    return project_to_so3(R)


def pose_to_dict(pose: HandPose):
    return {"global_rotation": pose.global_rotation.reshape(-1).tolist(),
            "translation": pose.translation.tolist(),
            "joint_rotations": pose.joint_rotations.reshape(NUM_JOINTS, 9).tolist()}


def pose_from_dict(doc, path="<pose>") -> HandPose:
    Y = _rotation(_field(doc, "global_rotation", path), "global_rotation", path)
    t = _array(_field(doc, "translation", path), "translation", path).reshape(-1)
    hs = _field(doc, "joint_rotations", path)
    if len(hs) != NUM_JOINTS:
        raise StructuralError(f"{path}: joint_rotations must have {NUM_JOINTS} entries")
    h = np.stack([_rotation(r, f"joint_rotations[{i}]", path) for i, r in enumerate(hs)])
    return HandPose(Y, t, h)


def load_pose(path) -> HandPose:
    return pose_from_dict(_read_json(path), path)


def save_pose(pose: HandPose, path):
    write_json(path, pose_to_dict(pose))


# ------------------------------------------------------------------ images

def load_image(path):
    """H x W x 3 float image in [0, 1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        img = np.load(path)
        if img.ndim != 3 or img.shape[2] != 3:
            raise FormatError(f"{path}: expected an H x W x 3 array")
        return img.astype(float)
    if suffix == ".ppm":
        tokens = []
        for line in path.read_text().splitlines():
            tokens += line.split("#", 1)[0].split()
        if not tokens or tokens[0] != "P3":
            raise FormatError(f"{path}: only ASCII (P3) PPM is supported")
        try:
            w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
            vals = np.array(tokens[4:], dtype=float)
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{path}: malformed PPM") from exc
        if vals.size != w * h * 3:
            raise FormatError(f"{path}: expected {w * h * 3} samples, found {vals.size}")
        return vals.reshape(h, w, 3) / maxval
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def save_image(img, path):
    path = Path(path)
    img = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        np.save(path, img)
        return
    q = np.round(img * 255.0).astype(np.uint8)
    if suffix == ".ppm":
        h, w, _ = q.shape
        rows = [" ".join(str(v) for v in row.reshape(-1)) for row in q]
        path.write_text(f"P3\n{w} {h}\n255\n" + "\n".join(rows) + "\n")
        return
    from PIL import Image
    Image.fromarray(q, "RGB").save(path, format="PNG")


# --------------------------------------------------------------- cameras

def camera_to_dict(cam: Camera):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height, "near_clip": cam.near_clip,
            "world_to_camera": cam.world_to_camera.reshape(-1).tolist()}


def camera_from_dict(doc, path="<camera>") -> Camera:
    E = _array(_field(doc, "world_to_camera", path), "world_to_camera", path).reshape(-1)
    if E.size != 16:
        raise FormatError(f"{path}: world_to_camera must hold 16 numbers")
    E = E.reshape(4, 4)
    if abs(np.linalg.det(E)) < 1e-12:
        raise ValidationError(f"{path}: world_to_camera is not invertible")
    try:
        return Camera(float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]),
                      int(doc["width"]), int(doc["height"]), E, float(doc.get("near_clip", 0.01)))
    except KeyError as exc:
        raise FormatError(f"{path}: camera is missing field {exc}") from exc


def load_cameras(path):
    doc = _read_json(path)
    return [camera_from_dict(c, path) for c in _field(doc, "cameras", path)]


def load_viewpoints(path, seed=None) -> ViewpointSet:
    path = Path(path)
    doc = _read_json(path)
    cams, targets = [], []
    for i, c in enumerate(_field(doc, "cameras", path)):
        cam = camera_from_dict(c, path)
        if "target" not in c:
            raise ValidationError(f"{path}: camera {i} has no target image")
        img = load_image(path.parent / c["target"])
        if img.shape != (cam.height, cam.width, 3):
            raise ValidationError(f"{path}: target of camera {i} is {img.shape[1]}x{img.shape[0]}, "
                                  f"camera expects {cam.width}x{cam.height}")
        cams.append(cam)
        targets.append(img)
    if not cams:
        raise ValidationError(f"{path}: no cameras")
    return ViewpointSet(cams, targets, int(doc.get("seed", 0) if seed is None else seed))


def save_viewpoints(path, cameras, target_names=None, seed=0):
    cams = []
    for i, cam in enumerate(cameras):
        d = camera_to_dict(cam)
        if target_names is not None:
            d["target"] = str(target_names[i])
        cams.append(d)
    write_json(path, {"seed": seed, "cameras": cams})


# --------------------------------------------------------------- binding

_BINDING_MAGIC = b"SGBIND"
_BINDING_VERSION = 1


def save_binding(binding: BindingTable, num_faces, path):
    k = len(binding)
    with open(path, "wb") as f:
        f.write(_BINDING_MAGIC + struct.pack("<BII", _BINDING_VERSION, k, int(num_faces)))
        f.write(binding.face_index.astype("<i4").tobytes())
        for arr in (binding.local_position, binding.local_orientation, binding.canonical_scale,
                    binding.opacities, binding.colors):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_binding(path, num_gaussians=None, num_faces=None) -> BindingTable:
    raw = Path(path).read_bytes()
    head = len(_BINDING_MAGIC) + struct.calcsize("<BII")
    if len(raw) < head or raw[:len(_BINDING_MAGIC)] != _BINDING_MAGIC:
        raise FormatError(f"{path}: not a binding file")
    version, k, nf = struct.unpack("<BII", raw[len(_BINDING_MAGIC):head])
    if version != _BINDING_VERSION:
        raise FormatError(f"{path}: unsupported binding version {version}")
    if num_gaussians is not None and k != num_gaussians:
        raise ValidationError(f"{path}: binding has {k} Gaussians, expected {num_gaussians}")
    if num_faces is not None and nf != num_faces:
        raise ValidationError(f"{path}: binding was built for {nf} faces, mesh has {num_faces}")
    expected = head + 4 * k + 8 * k * (3 + 4 + 3 + 1 + 3)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = head
    face_index = np.frombuffer(raw, "<i4", k, off).astype(np.int64)
    off += 4 * k
    parts = []
    for width in (3, 4, 3, 1, 3):
        parts.append(np.frombuffer(raw, "<f8", k * width, off).reshape(k, width).copy())
        off += 8 * k * width
    lp, lo, cs, op, col = parts
    binding = BindingTable(face_index, lp, lo, cs, op.reshape(-1), col)
    binding.check_faces(nf)
    return binding


# ---------------------------------------------------------- project config

@dataclass
class ProjectConfig:
    root: Path
    rig: Optional[Path] = None
    hand_gaussians: Optional[Path] = None
    object_gaussians: Optional[Path] = None
    binding: Optional[Path] = None
    viewpoints: Optional[Path] = None
    background: tuple = (0.0, 0.0, 0.0)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    refine: RefineConfig = field(default_factory=RefineConfig)
    contact_eps: float = 0.005
    penetration_limit: float = 0.002
    seed: int = 0

    def load_rig(self):
        return load_rig(self.rig) if self.rig else load_bundled_rig()

    def load_object(self):
        return load_gaussian_ply(self.object_gaussians) if self.object_gaussians else GaussianSet.empty()


_REFINE_KEYS = {f.name for f in fields(RefineConfig)} - {"raster", "background"}


def load_config(path) -> ProjectConfig:
    path = Path(path)
    doc = _read_json(path)
    root = path.parent
    paths = {}
    for key in ("rig", "hand_gaussians", "object_gaussians", "binding", "viewpoints"):
        if doc.get(key):
            p = root / doc[key]
            if not p.exists():
                raise FileNotFoundError(f"{path}: '{key}' file {p} does not exist")
            paths[key] = p
    bg = tuple(float(v) for v in doc.get("background", (0.0, 0.0, 0.0)))
    if len(bg) != 3:
        raise ValidationError(f"{path}: background must have 3 components")
    weight_doc = doc.get("loss_weights", {})
    unknown = set(weight_doc) - {f.name for f in fields(LossWeights)}
    if unknown:
        raise ValidationError(f"{path}: unknown loss weights {sorted(unknown)}")
    weights = LossWeights(**weight_doc)
    overrides = dict(doc.get("refine", {}))
    unknown = set(overrides) - _REFINE_KEYS
    if unknown:
        raise ValidationError(f"{path}: unknown refine settings {sorted(unknown)}")
    overrides.setdefault("lambda_1", weights.lambda_1)
    refine = RefineConfig(**overrides, background=bg)
    grasp = doc.get("grasp", {})
    cfg = ProjectConfig(root=root, background=bg, loss_weights=weights, refine=refine,
                        contact_eps=float(grasp.get("contact_eps", 0.005)),
                        penetration_limit=float(grasp.get("penetration_limit", 0.002)),
                        seed=int(doc.get("seed", 0)), **paths)
    if cfg.contact_eps < 0 or cfg.penetration_limit < 0:
        raise ValidationError(f"{path}: grasp thresholds must be non-negative")
    return cfg
