"""Programmatic face geometry for tests, demos, and the evaluation suite.

Provides a deterministic frontal 68-landmark template, a tiny linear shape
model for generating distinct subjects, smooth parametric head depth and
albedo maps, and the profile visibility rule.  Coordinates follow the
package conventions: x right, y down, z away from the camera in mm.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import N_LANDMARKS, LandmarkSet

HEAD_BASE_MM = 200.0


def frontal_landmarks(size: float = 128.0) -> LandmarkSet:
    """Fixed frontal landmark layout scaled to a size x size face box."""
    p = np.zeros((N_LANDMARKS, 2))
    t = np.arange(17) * np.pi / 16.0
    p[0:17, 0] = 0.5 - 0.38 * np.cos(t)
    p[0:17, 1] = 0.52 + 0.45 * np.sin(t)
    # brows
    bx = np.linspace(0.20, 0.42, 5)
    p[17:22, 0] = bx
    p[17:22, 1] = 0.30 - 0.03 * np.sin(np.linspace(0, np.pi, 5))
    p[22:27, 0] = 1.0 - bx[::-1]
    p[22:27, 1] = p[17:22, 1][::-1]
    # nose bridge and base
    p[27:31, 0] = 0.5
    p[27:31, 1] = np.linspace(0.38, 0.56, 4)
    p[31:36, 0] = np.linspace(0.42, 0.58, 5)
    p[31:36, 1] = [0.615, 0.625, 0.63, 0.625, 0.615]
    # eyes: six points each, corners plus upper/lower lids
    for base, cx in ((36, 0.30), (42, 0.70)):
        ex = np.array([-0.060, -0.025, 0.025, 0.060, 0.025, -0.025])
        ey = np.array([0.0, -0.018, -0.018, 0.0, 0.018, 0.018])
        p[base:base + 6, 0] = cx + ex
        p[base:base + 6, 1] = 0.40 + ey
    # mouth: outer ring of 12, inner ring of 8
    a = -np.pi + np.arange(12) * (2.0 * np.pi / 12.0)
    p[48:60, 0] = 0.5 + 0.14 * np.cos(a)
    p[48:60, 1] = 0.74 + 0.055 * np.sin(a)
    a = -np.pi + np.arange(8) * (2.0 * np.pi / 8.0)
    p[60:68, 0] = 0.5 + 0.075 * np.cos(a)
    p[60:68, 1] = 0.74 + 0.022 * np.sin(a)
    return LandmarkSet(p * size)


def shape_modes(size: float = 128.0) -> np.ndarray:
    """Two fixed displacement fields: face width and jaw length, in px."""
    base = frontal_landmarks(size).points
    c = base.mean(axis=0)
    modes = np.zeros((2, N_LANDMARKS, 2))
    modes[0, :, 0] = (base[:, 0] - c[0]) * 0.10
    lower = np.clip((base[:, 1] - c[1]) / (0.45 * size), 0.0, None)
    modes[1, :, 1] = lower ** 2 * 0.12 * size
    return modes


def subject_landmarks(size: float, coeffs) -> LandmarkSet:
    """Template deformed by the linear shape model, coeffs shape (2,)."""
    a = np.asarray(coeffs, dtype=np.float64)
    pts = frontal_landmarks(size).points + np.tensordot(a, shape_modes(size), 1)
    return LandmarkSet(pts)


def subject_coeffs(subject_id: int) -> np.ndarray:
    rng = np.random.RandomState(1000 + int(subject_id))
    return rng.uniform(-1.0, 1.0, size=2)


def _bump(x, y, cx, cy, sx, sy):
    return np.exp(-(((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))


def head_depth(size: int = 128, nose: float = 12.0, brow: float = 4.0,
               cheek: float = 5.0, dome: float = 35.0) -> np.ndarray:
    """Smooth convex head-like depth map; nose tip is nearest the camera."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x, y = xx / size, yy / size
    r2 = ((x - 0.5) / 0.55) ** 2 + ((y - 0.52) / 0.62) ** 2
    z = HEAD_BASE_MM - dome * np.exp(-2.2 * r2)
    z -= nose * _bump(x, y, 0.5, 0.56, 0.07, 0.14)
    z -= brow * (_bump(x, y, 0.31, 0.30, 0.13, 0.06)
                 + _bump(x, y, 0.69, 0.30, 0.13, 0.06))
    z -= cheek * (_bump(x, y, 0.27, 0.63, 0.11, 0.12)
                  + _bump(x, y, 0.73, 0.63, 0.11, 0.12))
    return z


def head_depth_for_subject(subject_id: int, size: int = 128) -> np.ndarray:
    a = subject_coeffs(subject_id)
    return head_depth(size, nose=12.0 + 3.0 * a[0], brow=4.0 + 1.5 * a[1],
                      cheek=5.0 - 2.0 * a[0], dome=35.0 + 4.0 * a[1])


def subject_albedo(subject_id: int, size: int = 128) -> np.ndarray:
    """Smooth per-subject albedo pattern with values in (0, 1]."""
    rng = np.random.RandomState(2000 + int(subject_id))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x, y = xx / size, yy / size
    a = np.full((size, size), 0.65)
    for _ in range(6):
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        sx, sy = rng.uniform(0.08, 0.25, size=2)
        a += rng.uniform(-0.18, 0.18) * _bump(x, y, cx, cy, sx, sy)
    a += 0.06 * np.sin(2.0 * np.pi * (rng.uniform(1.0, 2.5) * x
                                      + rng.uniform(0.0, 1.0)))
    # fine-grain skin texture; broad blobs alone vanish under band-pass
    # photometric normalization, leaving subjects indistinguishable
    tex = ndimage.gaussian_filter(rng.randn(size, size), 1.2)
    a += 0.08 * tex / tex.std()
    return np.clip(a, 0.05, 1.0)


def profile_visibility(yaw_deg: float, size: float = 128.0) -> np.ndarray:
    """Visibility mask: beyond 45 degrees the far half-face occludes."""
    vis = np.ones(N_LANDMARKS, dtype=bool)
    if abs(yaw_deg) <= 45.0:
        return vis
    x = frontal_landmarks(size).points[:, 0]
    mid = 0.5 * size
    if yaw_deg > 0:
        vis[x < mid - 1e-9] = False
    else:
        vis[x > mid + 1e-9] = False
    return vis
