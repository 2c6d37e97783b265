"""Reference-model construction, component segmentation, and shape recovery.

A reference model is the landmark-aligned average of depth scans plus an
albedo estimated from their textures. A query face is split into six
components (two halves, four quarters) along fixed landmark chains; each
component's depth is recovered independently by alternating minimization of

    sum (t - rho * (l . Y(n)))^2 / s^2  +  lambda_z * sum (LoG * (z - z_r))^2

over the masked pixels, with first-order spherical harmonics
Y(n) = (1, nx, ny, nz), normals n = (p, q, -1)/sqrt(p^2 + q^2 + 1) from the
depth gradient, and s the RMS of the target so the default weight carries
across images. The depth step linearizes the shading in the gradient and
solves one sparse least-squares system; every step is accepted only if the
exact objective does not increase, so the recorded history is monotone.

Recovered surfaces render at novel yaw via z-buffered rasterization, and
rendered or query images are photometrically flattened by gamma compression,
difference-of-Gaussians filtering, and two-stage contrast equalization.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import splu
from scipy.spatial import Delaunay, QhullError

from . import fileio, kernels
from .core import CrossfaceError, LandmarkSet, procrustes_similarity
from .surface import DepthGrid, NormalMap, depth_gradients, normals_from_depth, smooth_depth

__all__ = [
    "ReconError",
    "ReferenceDataError",
    "AlignmentError",
    "SegmentationError",
    "LightingRankError",
    "ShadingError",
    "ReferenceModel",
    "ComponentMask",
    "ReconState",
    "Rendered2D",
    "COMPONENT_IDS",
    "VERTICAL_CHAIN",
    "HORIZONTAL_CHAIN",
    "harmonics",
    "log_kernel",
    "build_reference",
    "segment_components",
    "estimate_lighting",
    "reconstruct_component",
    "render_pose",
    "illum_normalize",
    "save_reference",
    "load_reference",
]

REFERENCE_TAGS = ("CM", "CF", "AM", "AF")
COMPONENT_IDS = ("half-L", "half-R", "quarter-TL", "quarter-TR",
                 "quarter-BL", "quarter-BR")

# Midline chain (nose bridge, philtrum, chin) splitting left from right;
# under-eye and nose-base chain splitting top from bottom.
VERTICAL_CHAIN = (27, 28, 29, 30, 33, 51, 62, 66, 57, 8)
HORIZONTAL_CHAIN = (0, 36, 41, 40, 39, 31, 33, 35, 42, 47, 46, 45, 16)

LOG_SIGMA = 2.0
LOG_SUPPORT = 9
DEFAULT_LAMBDA_Z = 0.005
LIGHT_TRIM = 0.25
DEPTH_ANCHOR = 0.5
BOUNDARY_PAD = 6
DEFAULT_MAX_OUTER = 30
RELATIVE_TOL = 1e-4
ALBEDO_FLOOR = 1e-3
SHADING_MIN = 1e-6
BAD_SHADING_LIMIT = 0.2

GAMMA = 0.2
DOG_SIGMA_1 = 1.0
DOG_SIGMA_2 = 2.0
CE_ALPHA = 0.1
CE_TAU = 10.0


class ReconError(CrossfaceError):
    """Errors raised by the reconstruction stage."""


class ReferenceDataError(ReconError):
    """Reference scans missing or malformed."""


class AlignmentError(ReconError):
    """Landmark-based scan alignment failed."""


class SegmentationError(ReconError):
    """Landmark layout unusable for component segmentation."""


class LightingRankError(ReconError):
    """Lighting solve underdetermined (too few pixels or flat normals)."""


class ShadingError(ReconError):
    """Current lighting gives non-positive shading over too much of a mask."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceModel:
    """Averaged, smoothed depth with registered normals and albedo."""

    z: DepthGrid
    normals: NormalMap
    albedo: np.ndarray
    landmarks: LandmarkSet
    tag: str

    def __post_init__(self):
        albedo = np.asarray(self.albedo, dtype=np.float64)
        shape = self.z.z.shape
        if albedo.shape != shape or self.normals.n.shape[:2] != shape:
            raise ValueError("depth, normals and albedo must share one grid")
        if np.any(albedo <= 0.0) or np.any(albedo > 1.0):
            raise ValueError("albedo must lie in (0, 1]")
        object.__setattr__(self, "albedo", albedo)
        object.__setattr__(self, "tag", str(self.tag))


@dataclass(frozen=True)
class ComponentMask:
    """One face component: its id, bounding landmark chain, and raster."""

    id: str
    polygon: tuple
    mask: np.ndarray

    def __post_init__(self):
        if self.id not in COMPONENT_IDS:
            raise ValueError(f"unknown component id {self.id!r}")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2 or not mask.any():
            raise ValueError("component mask must be a nonempty 2-D raster")
        object.__setattr__(self, "polygon", tuple(self.polygon))
        object.__setattr__(self, "mask", mask)

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class ReconState:
    """Recovered depth, albedo and lighting for one component."""

    z: DepthGrid
    albedo: np.ndarray
    lighting: np.ndarray
    lambda_z: float
    history: tuple = field(default_factory=tuple)

    def __post_init__(self):
        lighting = np.asarray(self.lighting, dtype=np.float64).ravel()
        if lighting.shape != (4,):
            raise ValueError("lighting must hold 4 harmonic coefficients")
        if not self.lambda_z > 0:
            raise ValueError("lambda_z must be positive")
        history = tuple(float(v) for v in self.history)
        if not all(math.isfinite(v) for v in history):
            raise ValueError("objective history must be finite")
        object.__setattr__(self, "albedo",
                           np.asarray(self.albedo, dtype=np.float64))
        object.__setattr__(self, "lighting", lighting)
        object.__setattr__(self, "history", history)


@dataclass(frozen=True)
class Rendered2D:
    """Shaded orthographic projection at one yaw."""

    image: np.ndarray
    yaw_deg: float
    mask: np.ndarray

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if image.shape != mask.shape:
            raise ValueError("image and visibility mask must share a shape")
        if image.min() < 0.0 or image.max() > 1.0:
            raise ValueError("rendered image must lie in [0, 1]")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)


# ---------------------------------------------------------------------------
# Shading model
# ---------------------------------------------------------------------------

def harmonics(normals) -> np.ndarray:
    """First-order basis (1, nx, ny, nz) stacked along the last axis."""
    n = normals.n if isinstance(normals, NormalMap) else np.asarray(normals)
    ones = np.ones(n.shape[:-1] + (1,))
    return np.concatenate([ones, n], axis=-1)


def log_kernel(sigma: float = LOG_SIGMA, support: int = LOG_SUPPORT) -> np.ndarray:
    """Zero-sum Laplacian-of-Gaussian stencil (constants map to zero)."""
    half = support // 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    r2 = xx ** 2 + yy ** 2
    k = (r2 - 2.0 * sigma ** 2) / sigma ** 4 * np.exp(-r2 / (2.0 * sigma ** 2))
    return k - k.mean()


def _shading(z: np.ndarray, lighting: np.ndarray) -> np.ndarray:
    p, q = depth_gradients(z)
    w = np.sqrt(p ** 2 + q ** 2 + 1.0)
    l0, l1, l2, l3 = lighting
    return l0 + (l1 * p + l2 * q - l3) / w


def _objective(t, z, z_r, rho, lighting, m, lam, s, kernel) -> float:
    # The anchor term pins the affine depth modes the zero-sum kernel
    # cannot see; without it a tilt can imitate a lighting change and the
    # alternation drifts.
    shade = _shading(z, lighting)
    data = float(np.sum((t[m] - rho[m] * shade[m]) ** 2)) / s ** 2
    dz = z - z_r
    reg = float(np.sum(ndimage.convolve(dz, kernel, mode="constant") ** 2))
    reg += DEPTH_ANCHOR * float(np.sum(dz ** 2))
    return data + lam * reg


def estimate_lighting(target, normals, albedo, mask, trim: float = 0.0,
                      trim_rounds: int = 2) -> np.ndarray:
    """Least-squares harmonic lighting from t ~ albedo * (l . Y(n)).

    With ``trim`` > 0 the fit repeats ``trim_rounds`` times, each round
    discarding that fraction of pixels with the largest residuals, so a
    localized geometry mismatch cannot bend the global estimate.
    """
    t = np.asarray(target, dtype=np.float64)
    rho = np.asarray(albedo, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if m.sum() < 4:
        raise LightingRankError("lighting solve needs at least 4 pixels")
    basis = harmonics(normals)
    A = rho[m, None] * basis[m]
    y = t[m]

    def _fit(rows):
        sol, _, rank, _ = np.linalg.lstsq(A[rows], y[rows], rcond=None)
        if rank < 4:
            raise LightingRankError(
                "normal distribution too flat to fix lighting")
        return sol

    sol = _fit(slice(None))
    if trim > 0.0:
        for _ in range(trim_rounds):
            resid = np.abs(y - A @ sol)
            keep = max(4, int(round((1.0 - trim) * y.size)))
            sol = _fit(np.argsort(resid)[:keep])
    return sol


# ---------------------------------------------------------------------------
# Reference construction
# ---------------------------------------------------------------------------

def _resample(values: np.ndarray, coords_x, coords_y) -> np.ndarray:
    """Bilinear sampling; out-of-range and hole-adjacent samples go NaN.

    Edge replication plus an explicit range test keeps samples that land
    on the boundary within rounding error exact instead of poisoning them
    with the outside fill value.
    """
    h, w = values.shape
    out = ndimage.map_coordinates(values, [coords_y, coords_x],
                                  order=1, mode="nearest")
    eps = 1e-9
    outside = ((coords_x < -eps) | (coords_x > w - 1 + eps) |
               (coords_y < -eps) | (coords_y > h - 1 + eps))
    out[outside] = np.nan
    return out


def build_reference(scans: Sequence[tuple], tag: str) -> ReferenceModel:
    """Average landmark-aligned scans into one smoothed reference.

    ``scans`` holds (DepthGrid, texture, LandmarkSet) triples. Every scan is
    similarity-aligned to the first by landmarks and resampled to its grid;
    depth values scale with the in-plane factor so shapes stay similar.
    Depth and texture average pointwise, skipping holes, then the depth is
    smoothed and differentiated for normals. The albedo is the averaged
    texture divided by the reference's own frontal shading, clamped.
    """
    if not scans:
        raise ReferenceDataError("no scans supplied")
    base_depth, base_tex, base_marks = scans[0]
    shape = base_depth.z.shape
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)

    depth_acc = []
    tex_acc = []
    for depth, tex, marks in scans:
        tex = np.asarray(tex, dtype=np.float64)
        if depth.z.shape != tex.shape:
            raise ReferenceDataError("scan depth and texture grids differ")
        common = marks.visible & base_marks.visible
        try:
            T = procrustes_similarity(marks.points[common],
                                      base_marks.points[common])
        except (CrossfaceError, ValueError) as e:
            raise AlignmentError(f"cannot align scan to the base: {e}") from e
        inv = T.inverse()
        src = inv.apply(np.column_stack([xx.ravel(), yy.ravel()]))
        sx = src[:, 0].reshape(shape)
        sy = src[:, 1].reshape(shape)
        depth_acc.append(T.scale * _resample(depth.z, sx, sy))
        tex_acc.append(_resample(tex, sx, sy))

    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        mean_depth = np.nanmean(np.stack(depth_acc), axis=0)
        mean_tex = np.nanmean(np.stack(tex_acc), axis=0)
    if np.all(np.isnan(mean_depth)):
        raise ReferenceDataError("aligned scans share no valid pixels")
    mean_tex = np.nan_to_num(mean_tex, nan=float(np.nanmean(mean_tex)))

    smoothed = smooth_depth(DepthGrid(mean_depth, base_marks))
    normals = normals_from_depth(smoothed)

    face = np.ones(shape, dtype=bool)
    try:
        light = estimate_lighting(mean_tex, normals, np.ones(shape), face)
    except LightingRankError:
        # Flat references (constant normals) still build: ambient light only.
        light = np.array([float(mean_tex.mean()), 0.0, 0.0, 0.0])
    shade = _shading(smoothed.z, light)
    with np.errstate(divide="ignore", invalid="ignore"):
        albedo = np.where(shade > SHADING_MIN, mean_tex / shade, mean_tex)
    albedo = np.clip(albedo, ALBEDO_FLOOR, 1.0)
    return ReferenceModel(smoothed, normals, albedo, base_marks, tag)


# ---------------------------------------------------------------------------
# Component segmentation
# ---------------------------------------------------------------------------

def _chain_interp(points, chain, axis):
    coords = points[list(chain)]
    key = coords[:, axis]
    val = coords[:, 1 - axis]
    order = np.argsort(key, kind="stable")
    key, val = key[order], val[order]
    if np.any(np.diff(key) <= 0):
        raise SegmentationError("divider chain folds back on itself")
    return key, val


def segment_components(landmarks: LandmarkSet,
                       shape: Optional[tuple] = None) -> list:
    """Split the landmark hull into two halves and four quarters.

    The midline chain divides left from right; the under-eye chain divides
    top from bottom within each half, so each half is exactly the union of
    its two quarters.
    """
    pts = landmarks.points
    if not np.all(np.isfinite(pts)):
        raise SegmentationError("dense landmarks must all be populated")
    if shape is None:
        shape = (int(np.ceil(pts[:, 1].max())) + 2,
                 int(np.ceil(pts[:, 0].max())) + 2)
    try:
        tri = Delaunay(pts)
    except QhullError as e:
        raise SegmentationError(f"degenerate landmark layout: {e}") from e

    vy, vx = _chain_interp(pts, VERTICAL_CHAIN, axis=1)
    hx, hy = _chain_interp(pts, HORIZONTAL_CHAIN, axis=0)

    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    inside = tri.find_simplex(
        np.column_stack([xx.ravel(), yy.ravel()])) >= 0
    inside = inside.reshape(shape)
    left = xx < np.interp(yy, vy, vx)
    top = yy < np.interp(xx, hx, hy)

    half_l = inside & left
    half_r = inside & ~left
    rasters = dict(zip(COMPONENT_IDS,
                       (half_l, half_r, half_l & top, half_r & top,
                        half_l & ~top, half_r & ~top)))
    out = []
    for cid in COMPONENT_IDS:
        poly = VERTICAL_CHAIN if cid.startswith("half") else (
            VERTICAL_CHAIN + HORIZONTAL_CHAIN)
        if not rasters[cid].any():
            raise SegmentationError(f"component {cid} rasterized empty")
        out.append(ComponentMask(cid, poly, rasters[cid]))
    return out


# ---------------------------------------------------------------------------
# Component reconstruction
# ---------------------------------------------------------------------------

def _gradient_ops(mask: np.ndarray) -> tuple:
    """Sparse central-difference operators mapping masked depth offsets to
    per-pixel gradients at masked pixels (offsets are zero off the mask)."""
    h, w = mask.shape
    idx = -np.ones(mask.shape, dtype=np.int64)
    ii, jj = np.nonzero(mask)
    idx[ii, jj] = np.arange(len(ii))
    n = len(ii)

    def build(axis):
        rows, cols, vals = [], [], []
        for r, (i, j) in enumerate(zip(ii, jj)):
            if axis == 1:
                lo, hi, limit = (i, j - 1), (i, j + 1), w
                pos = j
            else:
                lo, hi, limit = (i - 1, j), (i + 1, j), h
                pos = i
            if 0 < pos < limit - 1:
                pairs = ((hi, 0.5), (lo, -0.5))
            elif pos == 0:
                pairs = ((hi, 1.0), ((i, j), -1.0))
            else:
                pairs = (((i, j), 1.0), (lo, -1.0))
            for (pi, pj), v in pairs:
                k = idx[pi, pj]
                if k >= 0:
                    rows.append(r)
                    cols.append(k)
                    vals.append(v)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    return build(1), build(0)


def _log_op(mask: np.ndarray, kernel: np.ndarray) -> sparse.csr_matrix:
    """Sparse matrix applying the LoG stencil to masked depth offsets,
    rows covering every output pixel the stencil can reach."""
    h, w = mask.shape
    half = kernel.shape[0] // 2
    idx = -np.ones(mask.shape, dtype=np.int64)
    ii, jj = np.nonzero(mask)
    idx[ii, jj] = np.arange(len(ii))
    rows, cols, vals = [], [], []
    for di in range(-half, half + 1):
        for dj in range(-half, half + 1):
            kv = kernel[half + di, half + dj]
            if kv == 0.0:
                continue
            oi = ii + di
            oj = jj + dj
            ok = (oi >= 0) & (oi < h) & (oj >= 0) & (oj < w)
            rows.append(oi[ok] * w + oj[ok])
            cols.append(idx[ii[ok], jj[ok]])
            vals.append(np.full(int(ok.sum()), kv))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(h * w, len(ii)))


def _depth_step(t, z, z_r, rho, lighting, m, lam, s, kernel, ops,
                max_inner: int = 12):
    """Minimize the objective over depth by relinearized sparse solves.

    Each pass expands the shading to first order in the depth gradient,
    solves the resulting regularized least-squares system, and accepts the
    largest backtracked step that does not increase the exact objective;
    passes repeat until the improvement stalls.
    """
    gxd, gyd, reg0, ii, jj = ops
    reg = lam * reg0
    obj = _objective(t, z, z_r, rho, lighting, m, lam, s, kernel)
    l0, l1, l2, l3 = lighting
    for _ in range(max_inner):
        p, q = depth_gradients(z)
        w = np.sqrt(p ** 2 + q ** 2 + 1.0)
        num = l1 * p + l2 * q - l3
        shade = l0 + num / w
        d_p = (l1 / w - num * p / w ** 3)[m]
        d_q = (l2 / w - num * q / w ** 3)[m]

        M = sparse.diags(rho[m] * d_p) @ gxd + sparse.diags(rho[m] * d_q) @ gyd
        dz_cur = (z - z_r)[ii, jj]
        d0 = (t - rho * shade)[m] + M @ dz_cur
        A = (M.T @ M) / s ** 2 + reg
        rhs = M.T @ d0 / s ** 2
        u = splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(rhs)

        target = z_r.copy()
        target[ii, jj] += u
        accepted = False
        beta = 1.0
        while beta > 1e-3:
            z_try = z + beta * (target - z)
            obj_try = _objective(t, z_try, z_r, rho, lighting, m, lam, s,
                                 kernel)
            if obj_try <= obj + 1e-12:
                accepted = obj - obj_try > 1e-5 * max(obj, 1e-300)
                z, obj = z_try, obj_try
                break
            beta *= 0.5
        if not accepted:
            break
    return z, obj


def _albedo_step(t, z, z_r, rho, lighting, m, lam, s, kernel):
    """Albedo refresh by one photometric gain on the current map.

    A pointwise ratio t / shading would absorb every depth-induced
    intensity difference and freeze the geometry, so the refresh is
    restricted to a single multiplicative gain per component, fit by least
    squares between the query and the current render.
    """
    shade = _shading(z, lighting)
    bad = m & (shade <= SHADING_MIN)
    if bad.sum() > BAD_SHADING_LIMIT * m.sum():
        raise ShadingError(
            "lighting gives non-positive shading over more than "
            f"{int(100 * BAD_SHADING_LIMIT)}% of the component")
    obj = _objective(t, z, z_r, rho, lighting, m, lam, s, kernel)
    ok = m & ~bad
    model = rho[ok] * shade[ok]
    denom = float(model @ model)
    if denom <= 0.0:
        return rho, obj
    gain = float(t[ok] @ model) / denom
    rho_new = rho.copy()
    rho_new[m] = np.clip(rho[m] * gain, ALBEDO_FLOOR, 1.0)

    obj_new = _objective(t, z, z_r, rho_new, lighting, m, lam, s, kernel)
    if obj_new <= obj + 1e-12:
        return rho_new, obj_new
    return rho, obj


def reconstruct_component(target, ref: ReferenceModel, mask,
                          lambda_z: float = DEFAULT_LAMBDA_Z,
                          max_outer: int = DEFAULT_MAX_OUTER,
                          initial_lighting=None) -> ReconState:
    """Recover component depth by alternating lighting/depth/albedo updates.

    The loop solves lighting from the reference normals first, then cycles:
    relinearized depth solves, a single-gain albedo refresh, and a trimmed
    lighting re-fit from the new depth. Each update must not increase the
    objective, so the recorded history is non-increasing; iteration stops
    once the relative decrease falls under 1e-4 or ``max_outer`` is hit.

    ``initial_lighting`` overrides the first lighting solve, letting one
    estimate be shared across the components of a single query.
    """
    t = np.asarray(target, dtype=np.float64)
    m = mask.mask if isinstance(mask, ComponentMask) else np.asarray(mask, bool)
    z_r = ref.z.z
    if t.shape != z_r.shape or m.shape != z_r.shape:
        raise ReconError("target, reference and mask grids must match")
    if not lambda_z > 0:
        raise ReconError("lambda_z must be positive")

    if initial_lighting is None:
        lighting = estimate_lighting(t, ref.normals, ref.albedo, m,
                                     trim=LIGHT_TRIM)
    else:
        lighting = np.asarray(initial_lighting, dtype=np.float64).ravel()
        if lighting.shape != (4,):
            raise ReconError("initial lighting must hold 4 coefficients")
    s = float(np.sqrt(np.mean(t[m] ** 2)))
    s = max(s, 1e-9)
    kernel = log_kernel()
    # Depth unknowns extend a ring beyond the component so geometry that
    # straddles the boundary stays representable; intensities are matched
    # on the component pixels only.
    solve_m = ndimage.binary_dilation(m, iterations=BOUNDARY_PAD)
    gx, gy = _gradient_ops(solve_m)
    logop = _log_op(solve_m, kernel)
    ii, jj = np.nonzero(solve_m)
    sel = m[ii, jj]
    reg0 = (logop.T @ logop +
            DEPTH_ANCHOR * sparse.identity(int(ii.size), format="csr"))
    ops = (gx[sel], gy[sel], reg0, ii, jj)

    z = z_r.copy()
    rho = ref.albedo.copy()
    obj = _objective(t, z, z_r, rho, lighting, m, lambda_z, s, kernel)
    history = [obj]
    for _ in range(max_outer):
        z, obj = _depth_step(t, z, z_r, rho, lighting, m, lambda_z, s,
                             kernel, ops)
        rho, obj = _albedo_step(t, z, z_r, rho, lighting, m, lambda_z, s,
                                kernel)
        light_new = estimate_lighting(t, normals_from_depth(z), rho, m,
                                      trim=LIGHT_TRIM)
        obj_new = _objective(t, z, z_r, rho, light_new, m, lambda_z, s,
                             kernel)
        if obj_new <= obj + 1e-12:
            lighting, obj = light_new, obj_new
        prev = history[-1]
        history.append(obj)
        if prev <= 1e-15 or (prev - obj) / prev < RELATIVE_TOL:
            break
    return ReconState(DepthGrid(z, ref.landmarks), rho, lighting,
                      lambda_z, history)


# ---------------------------------------------------------------------------
# Novel-pose rendering
# ---------------------------------------------------------------------------

def _grid_triangles(h: int, w: int) -> np.ndarray:
    base = np.arange(h - 1)[:, None] * w + np.arange(w - 1)
    base = base.ravel()
    upper = np.column_stack([base, base + 1, base + w])
    lower = np.column_stack([base + 1, base + w + 1, base + w])
    return np.vstack([upper, lower]).astype(np.int64)


def _yaw_geometry(z, yaw_deg: float):
    """Rotated vertex positions and normals plus the kept triangle list."""
    h, w = z.shape
    finite = np.isfinite(z)
    z0 = float(z[finite].mean())
    cx = (w - 1) / 2.0

    theta = math.radians(float(yaw_deg))
    c, sn = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    zf = np.where(finite, z, z0)
    xs = c * (xx - cx) + sn * (zf - z0) + cx
    zs = -sn * (xx - cx) + c * (zf - z0) + z0

    n = normals_from_depth(zf).n
    nx = c * n[:, :, 0] + sn * n[:, :, 2]
    nz = -sn * n[:, :, 0] + c * n[:, :, 2]

    tris = _grid_triangles(h, w)
    keep = finite.ravel()[tris].all(axis=1)
    return xs, yy, xx, zs, nx, n[:, :, 1], nz, tris, keep, h, w


def render_pose(state: Union[ReconState, ReferenceModel], yaw_deg: float,
                lighting) -> Rendered2D:
    """Rotate the surface about the vertical axis and shade it.

    Orthographic projection with a z-buffer; the visibility mask keeps
    covered pixels whose rotated normals still face the camera.
    """
    rho = state.albedo
    lighting = np.asarray(lighting, dtype=np.float64).ravel()
    xs, yy, xx, zs, nx, ny, nz, tris, keep, h, w = \
        _yaw_geometry(state.z.z, yaw_deg)
    basis = np.stack([np.ones_like(nx), nx, ny, nz], axis=-1)
    shade = np.clip(rho * (basis @ lighting), 0.0, 1.0)

    img, _, cover = kernels.raster_mesh(
        xs.ravel(), yy.ravel(), zs.ravel(), shade.ravel(), tris, keep, h, w)
    nz_img, _, _ = kernels.raster_mesh(
        xs.ravel(), yy.ravel(), zs.ravel(), nz.ravel(), tris, keep, h, w)
    visible = cover & (nz_img < 0.0)
    return Rendered2D(np.where(visible, img, 0.0), float(yaw_deg), visible)


def pose_source_map(state, yaw_deg: float):
    """Frontal source column of every pixel in the rotated view.

    A yaw rotation preserves rows, so (row, returned column) locates each
    visible pixel's origin in the frontal frame; occluded or uncovered
    pixels hold NaN. Lets frontal-frame masks be carried into any pose.
    """
    xs, yy, xx, zs, nx, ny, nz, tris, keep, h, w = \
        _yaw_geometry(state.z.z, yaw_deg)
    src_img, _, cover = kernels.raster_mesh(
        xs.ravel(), yy.ravel(), zs.ravel(), xx.ravel(), tris, keep, h, w)
    nz_img, _, _ = kernels.raster_mesh(
        xs.ravel(), yy.ravel(), zs.ravel(), nz.ravel(), tris, keep, h, w)
    visible = cover & (nz_img < 0.0)
    return np.where(visible, src_img, np.nan), visible


# ---------------------------------------------------------------------------
# Illumination normalization
# ---------------------------------------------------------------------------

def illum_normalize(image) -> np.ndarray:
    """Photometric flattening: gamma, DoG band-pass, contrast equalization.

    Global intensity gain cancels in the first equalization stage, and the
    compressive tanh cap bounds the result, mapped affinely to [0, 1];
    constant images land exactly on the midpoint.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("image must be nonempty")
    x = np.power(np.clip(img, 0.0, None), GAMMA)
    d = ndimage.gaussian_filter(x, DOG_SIGMA_1) \
        - ndimage.gaussian_filter(x, DOG_SIGMA_2)
    norm1 = np.mean(np.abs(d) ** CE_ALPHA) ** (1.0 / CE_ALPHA)
    if norm1 > 1e-12:
        d = d / norm1
    norm2 = np.mean(np.minimum(np.abs(d), CE_TAU) ** CE_ALPHA) ** (1.0 / CE_ALPHA)
    if norm2 > 1e-12:
        d = d / norm2
    d = CE_TAU * np.tanh(d / CE_TAU)
    return (d / CE_TAU + 1.0) / 2.0


# ---------------------------------------------------------------------------
# Reference persistence (one directory per model)
# ---------------------------------------------------------------------------

def save_reference(directory, ref: ReferenceModel) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fileio.write_depth_fdm1(d / "depth.fdm", ref.z.z)
    fileio.write_depth_fdm1(d / "albedo.fdm", ref.albedo)
    fileio.write_landmarks(d / "landmarks.json",
                           fileio.LandmarkRecord(ref.landmarks))
    meta = {"format_version": 1, "tag": ref.tag,
            "grid": list(ref.z.z.shape)}
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_reference(directory) -> ReferenceModel:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
        if int(meta["format_version"]) != 1:
            raise fileio.VersionError(
                f"unsupported reference version {meta['format_version']}")
        depth = fileio.read_depth_fdm1(d / "depth.fdm")
        albedo = fileio.read_depth_fdm1(d / "albedo.fdm")
        marks = fileio.read_landmarks(d / "landmarks.json").landmarks
    except FileNotFoundError as e:
        raise fileio.FormatError(f"incomplete reference directory: {e}") from e
    if list(depth.shape) != list(meta["grid"]):
        raise fileio.FormatError("reference grid does not match metadata")
    grid = DepthGrid(depth, marks)
    return ReferenceModel(grid, normals_from_depth(grid), albedo, marks,
                          meta["tag"])
