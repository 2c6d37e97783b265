"""Shared geometric types, similarity alignment, pose and landmark metrics.

Conventions used across the package:

* images are row-major ``(H, W)`` float64 arrays with intensities in [0, 1],
  indexed ``img[y, x]``;
* landmark coordinates are continuous pixel positions ``(x, y)``;
* the dense landmark set has 68 points in the usual annotation order
  (jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67);
* 3-D axes: x right, y down, z depth away from the camera (mm, 1 px = 1 mm).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

N_LANDMARKS = 68

LEFT_EYE = tuple(range(36, 42))
RIGHT_EYE = tuple(range(42, 48))
MOUTH_CORNERS = (48, 54)

# Default sparse subset driving the tree model: contour anchors, chin, inner
# brows, nose bridge/tip/nostrils, eye corners and upper lids, mouth corners
# and lip midpoints.  19 indices, configurable at training time.
DEFAULT_SPARSE_INDEX = (
    0, 8, 16, 21, 22, 27, 30, 31, 35,
    36, 38, 39, 42, 43, 45, 48, 51, 54, 57,
)

# Yaw hypotheses evaluated by estimate_yaw, degrees.
YAW_GRID = tuple(range(-90, 91, 15))


class CrossfaceError(Exception):
    """Base class for all package-specific errors."""


class DegenerateGeometryError(CrossfaceError):
    """Raised when point configurations do not determine a transform."""


class VisibilityMismatchError(CrossfaceError):
    """Raised when two landmark sets disagree on which points are visible."""


class NormalizationError(CrossfaceError):
    """Raised when a metric's normalizing distance is zero."""


def as_image(arr) -> np.ndarray:
    """Validate and convert an array to the canonical image representation."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"image must be a nonempty 2-D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite intensities")
    return img


@dataclass(frozen=True)
class LandmarkSet:
    """Dense 68-point landmark annotation with visibility flags.

    Attributes:
        points: (68, 2) float array of (x, y) positions; rows for invisible
            landmarks may be NaN.
        visible: (68,) bool mask.
        sparse_index: indices of the sparse subset located by the tree model.
        low_error_index: indices of the low-residual subset used by the
            densifying regressor's refinement loop (empty until assigned).
    """

    points: np.ndarray
    visible: np.ndarray = None
    sparse_index: tuple = DEFAULT_SPARSE_INDEX
    low_error_index: tuple = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise ValueError(f"expected ({N_LANDMARKS}, 2) points, got {pts.shape}")
        object.__setattr__(self, "points", pts)
        vis = self.visible
        if vis is None:
            vis = np.isfinite(pts).all(axis=1)
        vis = np.asarray(vis, dtype=bool)
        if vis.shape != (N_LANDMARKS,):
            raise ValueError("visible mask must have one flag per landmark")
        object.__setattr__(self, "visible", vis)
        if not np.all(np.isfinite(pts[vis])):
            raise ValueError("visible landmarks must be finite")
        for name in ("sparse_index", "low_error_index"):
            idx = tuple(int(i) for i in getattr(self, name))
            if any(not 0 <= i < N_LANDMARKS for i in idx):
                raise ValueError(f"{name} out of range")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, idx)
        if len(self.sparse_index) == 0:
            raise ValueError("sparse_index must be nonempty")

    def sparse_points(self) -> np.ndarray:
        return self.points[list(self.sparse_index)]

    def with_points(self, points, visible=None) -> "LandmarkSet":
        return LandmarkSet(points, visible if visible is not None else self.visible,
                           self.sparse_index, self.low_error_index)


@dataclass(frozen=True)
class SimilarityTransform:
    """2-D similarity: scale then rotate then translate."""

    scale: float
    rotation: float
    tx: float
    ty: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.matrix().T + np.array([self.tx, self.ty])

    def inverse(self) -> "SimilarityTransform":
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        inv_s = 1.0 / self.scale
        tx = -inv_s * (c * self.tx - s * self.ty)
        ty = -inv_s * (s * self.tx + c * self.ty)
        return SimilarityTransform(inv_s, -self.rotation, tx, ty)


@dataclass(frozen=True)
class PoseEstimate:
    yaw_deg: float
    residual: float

    def __post_init__(self):
        if not -90.0 <= self.yaw_deg <= 90.0:
            raise ValueError("yaw out of [-90, 90]")
        if self.residual < 0:
            raise ValueError("residual must be non-negative")


def procrustes_similarity(src_xy, dst_xy) -> SimilarityTransform:
    """Least-squares similarity transform mapping src points onto dst points.

    Closed-form orthogonal Procrustes solution (rotation without reflection,
    uniform scale, translation) minimizing sum ||T(src_i) - dst_i||^2.
    """
    src = np.asarray(src_xy, dtype=np.float64)
    dst = np.asarray(dst_xy, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[0] < 2:
        raise ValueError("need matching (n>=2, 2) point arrays")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    var_s = (cs ** 2).sum()
    if var_s < 1e-20:
        raise DegenerateGeometryError("source points are coincident")
    cov = cd.T @ cs
    u, sv, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    corr = np.diag([1.0, d])
    rot = u @ corr @ vt
    scale = (sv * np.diag(corr)).sum() / var_s
    if scale <= 0:
        raise DegenerateGeometryError("degenerate configuration, non-positive scale")
    theta = math.atan2(rot[1, 0], rot[0, 0])
    t = mu_d - scale * (rot @ mu_s)
    return SimilarityTransform(scale, theta, t[0], t[1])


def align_similarity(src: LandmarkSet, dst: LandmarkSet, indices=None) -> SimilarityTransform:
    """Similarity transform aligning src landmarks to dst over given indices.

    Only indices visible in both sets participate.  Raises
    DegenerateGeometryError for coincident or insufficient correspondences.
    """
    if indices is None:
        indices = range(N_LANDMARKS)
    idx = [i for i in indices if src.visible[i] and dst.visible[i]]
    if len(idx) < 2:
        raise DegenerateGeometryError("need at least 2 shared visible landmarks")
    return procrustes_similarity(src.points[idx], dst.points[idx])


def project_yaw(reference3d, yaw_deg: float) -> np.ndarray:
    """Orthographic projection of yaw-rotated 3-D landmark positions.

    Rotation is about the vertical (y) axis; positive yaw turns +z depth
    toward +x, i.e. the face turns toward image-right.
    """
    ref = np.asarray(reference3d, dtype=np.float64)
    ref = ref - ref.mean(axis=0)
    th = math.radians(yaw_deg)
    x = ref[:, 0] * math.cos(th) + ref[:, 2] * math.sin(th)
    return np.column_stack([x, ref[:, 1]])


def estimate_yaw(query: LandmarkSet, reference3d) -> PoseEstimate:
    """Estimate yaw by fitting projected reference landmarks to the query.

    Scans the fixed yaw grid (15 degree steps, -90..90), similarity-aligns
    the projected reference to the query's visible landmarks at each
    hypothesis, and returns the yaw with the smallest RMS alignment
    residual.  Ties resolve to the smaller yaw.
    """
    ref = np.asarray(reference3d, dtype=np.float64)
    if ref.shape != (N_LANDMARKS, 3):
        raise ValueError(f"reference must be ({N_LANDMARKS}, 3)")
    vis = np.nonzero(query.visible)[0]
    if vis.size < 4:
        raise DegenerateGeometryError(
            f"need at least 4 visible landmarks, got {vis.size}")
    q = query.points[vis]
    best_yaw, best_res = None, np.inf
    for yaw in YAW_GRID:
        proj = project_yaw(ref, yaw)[vis]
        try:
            t = procrustes_similarity(proj, q)
        except DegenerateGeometryError:
            continue
        res = math.sqrt(np.mean(np.sum((t.apply(proj) - q) ** 2, axis=1)))
        if res < best_res - 1e-12:
            best_yaw, best_res = yaw, res
    if best_yaw is None:
        raise DegenerateGeometryError("no yaw hypothesis could be aligned")
    return PoseEstimate(float(best_yaw), float(best_res))


def _interpupil_distance(truth: LandmarkSet) -> float:
    left = truth.points[list(LEFT_EYE)].mean(axis=0)
    right = truth.points[list(RIGHT_EYE)].mean(axis=0)
    return float(np.linalg.norm(left - right))


def _eye_mouth_distance(truth: LandmarkSet) -> float:
    eye_idx = [i for i in LEFT_EYE + RIGHT_EYE if truth.visible[i]]
    if not eye_idx:
        raise NormalizationError("no visible eye landmarks for normalization")
    eyes = truth.points[eye_idx].mean(axis=0)
    mouth = truth.points[list(MOUTH_CORNERS)].mean(axis=0)
    return float(np.linalg.norm(eyes - mouth))


def landmark_error(pred: LandmarkSet, truth: LandmarkSet, yaw_deg: float) -> float:
    """Normalized mean landmark localization error, in percent.

    Mean Euclidean distance over visible landmarks, divided by the
    inter-pupil distance for |yaw| <= 45 degrees or the eye-to-mouth
    distance beyond, times 100.  Normalizing distances come from the truth
    set (group means; see LEFT_EYE / RIGHT_EYE / MOUTH_CORNERS).
    """
    if not np.array_equal(pred.visible, truth.visible):
        raise VisibilityMismatchError("pred and truth disagree on visibility")
    vis = truth.visible
    if not vis.any():
        raise VisibilityMismatchError("no visible landmarks to score")
    err = float(np.mean(np.linalg.norm(pred.points[vis] - truth.points[vis], axis=1)))
    norm = _interpupil_distance(truth) if abs(yaw_deg) <= 45.0 else _eye_mouth_distance(truth)
    if norm < 1e-12:
        raise NormalizationError("normalizing distance is zero")
    return 100.0 * err / norm
