"""Angle and vector math for head-pose and gaze.

Angles are (yaw, pitch) in degrees. The direction transform is

    T(yaw, pitch) = (cos(pitch) * sin(yaw), sin(pitch), cos(pitch) * cos(yaw))

so (0, 0) is the forward direction +z, positive yaw turns toward +x and
positive pitch turns toward +y. Roll is never modelled.

All functions accept either a single pair or an array whose last axis holds
the two angles (or three vector components) and broadcast over the leading
axes.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

UNIT_TOL = 1e-6


class NormalizationError(ValueError):
    """Raised when a direction vector is not unit length."""


class AngleRangeError(ValueError):
    """Raised when a composed direction leaves the (-90, 90) label range."""


class AnglePair(NamedTuple):
    yaw: float
    pitch: float


def _angles(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape[-1:] != (2,):
        raise ValueError(f"expected trailing axis of size 2, got shape {arr.shape}")
    return arr


def angles_to_vector(a) -> np.ndarray:
    arr = np.deg2rad(_angles(a))
    yaw, pitch = arr[..., 0], arr[..., 1]
    cp = np.cos(pitch)
    return np.stack([cp * np.sin(yaw), np.sin(pitch), cp * np.cos(yaw)], axis=-1)


def vector_to_angles(v, tol: float = UNIT_TOL) -> np.ndarray:
    """Inverse of :func:`angles_to_vector`; returns ``[..., (yaw, pitch)]``.

    Raises NormalizationError if any vector is further than ``tol`` from
    unit length.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1:] != (3,):
        raise ValueError(f"expected trailing axis of size 3, got shape {v.shape}")
    norm = np.linalg.norm(v, axis=-1)
    if np.any(~np.isfinite(norm)) or np.any(np.abs(norm - 1.0) > tol):
        worst = float(np.max(np.abs(norm - 1.0)))
        raise NormalizationError(f"vector norm deviates from 1 by {worst:.3g}")
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    # atan2 form is asin(y) for unit vectors but keeps precision near the poles
    pitch = np.arctan2(y, np.hypot(x, z))
    yaw = np.arctan2(x, z)
    return np.rad2deg(np.stack([yaw, pitch], axis=-1))


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def vem(pred, ref) -> np.ndarray | float:
    """Angle in degrees between the 3D directions of ``pred`` and ``ref``."""
    p = angles_to_vector(pred)
    r = angles_to_vector(ref)
    dot = np.clip(np.sum(p * r, axis=-1), -1.0, 1.0)
    out = np.rad2deg(np.arccos(dot))
    return float(out) if out.ndim == 0 else out


def aem(preds, refs) -> float:
    """Mean absolute yaw/pitch difference, ``sum(|dyaw| + |dpitch|) / (2n)``."""
    p = _angles(preds).reshape(-1, 2)
    r = _angles(refs).reshape(-1, 2)
    if p.shape != r.shape:
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(r)} references")
    if len(p) == 0:
        raise ValueError("aem needs at least one pair")
    return float(np.sum(np.abs(p - r)) / (2 * len(p)))


def head_rotation(head) -> np.ndarray:
    """Rotation matrix (or stack of them) for a roll-free head pose.

    Yaw about the vertical axis is applied first, then pitch about the
    head's rotated horizontal axis, so ``R(head) @ [0, 0, 1] == T(head)``.
    """
    arr = np.deg2rad(_angles(head))
    yaw, pitch = arr[..., 0], arr[..., 1]
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    zero, one = np.zeros_like(yaw), np.ones_like(yaw)
    r_yaw = np.stack(
        [
            np.stack([cy, zero, sy], -1),
            np.stack([zero, one, zero], -1),
            np.stack([-sy, zero, cy], -1),
        ],
        -2,
    )
    r_pitch = np.stack(
        [
            np.stack([one, zero, zero], -1),
            np.stack([zero, cp, sp], -1),
            np.stack([zero, -sp, cp], -1),
        ],
        -2,
    )
    return r_yaw @ r_pitch


def _check_range(angles: np.ndarray, what: str) -> None:
    if np.any(~np.isfinite(angles)) or np.any(np.abs(angles) >= 90.0):
        raise AngleRangeError(f"{what} leaves the (-90, 90) range: {angles.tolist()}")


def compose_gaze(head, eye_in_head) -> np.ndarray:
    """Gaze in camera coordinates from head pose and eye-in-head direction."""
    rot = head_rotation(head)
    e = angles_to_vector(eye_in_head)
    g = np.einsum("...ij,...j->...i", rot, e)
    out = vector_to_angles(normalize(g))
    # forward hemisphere only: z <= 0 would put yaw outside (-90, 90)
    if np.any(g[..., 2] <= 0):
        raise AngleRangeError("composed gaze points away from the camera hemisphere")
    _check_range(out, "composed gaze")
    return out


def decompose_eye(head, gaze) -> np.ndarray:
    """Eye-in-head direction such that ``compose_gaze(head, result) == gaze``."""
    rot = head_rotation(head)
    g = angles_to_vector(gaze)
    e = np.einsum("...ji,...j->...i", rot, g)
    return vector_to_angles(normalize(e))
