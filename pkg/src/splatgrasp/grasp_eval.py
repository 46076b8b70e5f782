"""Geometric grasp-success proxy: fingertip contacts plus a penetration bound."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import List, Optional

import numpy as np

from .errors import StructuralError, ValidationError
from .geometry import nearest_faces, winding_numbers
from .hand_rig import FINGER_NAMES

DEFAULT_CONTACT_EPS = 0.005
DEFAULT_PENETRATION_LIMIT = 0.002
MIN_CONTACTS = 2


@dataclass
class ContactReport:
    contacts: List[bool]
    min_distance: List[float]
    max_penetration: Optional[float]
    success: bool
    signed: bool = True

    @property
    def num_contacts(self):
        return int(sum(self.contacts))

    def as_dict(self):
        out = asdict(self)
        out["fingers"] = list(FINGER_NAMES)
        out["num_contacts"] = self.num_contacts
        return out


def surface_distances(points, surface):
    """Signed distances to a closed mesh ``(vertices, faces)`` or unsigned ones to a point set.

    Returns (distances, signed_flag).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if isinstance(surface, tuple):
        verts, faces = surface
        faces = np.asarray(faces)
        if len(faces) == 0:
            raise ValidationError("object mesh has no faces")
        _, dist = nearest_faces(points, verts, faces)
        inside = winding_numbers(points, verts, faces) > 0.5
        return np.where(inside, -dist, dist), True
    cloud = np.asarray(surface, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        raise ValidationError("object point set is empty")
    d = np.sqrt(((points[:, None, :] - cloud[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return d, False


def finger_contacts(posed_vertices, rig, object_surface, contact_eps=DEFAULT_CONTACT_EPS,
                    penetration_limit=DEFAULT_PENETRATION_LIMIT) -> ContactReport:
    """Contact flags per finger from the fingertip vertex groups of ``rig``.

    ``object_surface`` is either a ``(vertices, faces)`` tuple describing a
    closed triangle mesh or an (M, 3) point array. Penetration cannot be
    measured against a point set; it is then reported as ``None`` and does not
    block success.
    """
    V = np.asarray(posed_vertices, dtype=float)
    if V.shape != (rig.num_vertices, 3):
        raise StructuralError(f"expected {rig.num_vertices}x3 posed vertices, got {V.shape}")
    groups = rig.fingertip_groups
    for name, g in zip(FINGER_NAMES, groups):
        if len(g) == 0:
            raise ValidationError(f"fingertip group '{name}' is empty")
    all_idx = np.concatenate(groups)
    dist, signed = surface_distances(V[all_idx], object_surface)
    splits = np.cumsum([len(g) for g in groups])[:-1]
    per_finger = [float(d.min()) for d in np.split(dist, splits)]
    contacts = [d <= contact_eps for d in per_finger]
    if signed:
        max_pen = float(max(0.0, -dist.min()))
        ok_pen = max_pen <= penetration_limit
    else:
        max_pen = None
        ok_pen = True
    success = sum(contacts) >= MIN_CONTACTS and ok_pen
    return ContactReport(contacts, per_finger, max_pen, bool(success), signed)
