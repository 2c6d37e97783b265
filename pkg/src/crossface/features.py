"""Gradient-histogram cell features, feature pyramids, and the dense
descriptors (intensity, local binary patterns, Gabor bank) used to build
identification dictionaries.

HOG layout: 9 unsigned orientation bins over [0, pi) with bin centers at
k*20 degrees, hard spatial assignment of pixels to cells, linear
interpolation across orientation bins, 2x2-cell block L2 normalization
clipped at 0.2 and renormalized.  Each cell contributes one 9-bin slice per
containing block (block indices clamped at the grid border), 36 values per
cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from . import kernels
from .core import CrossfaceError, as_image

N_ORIENT = 9
BLOCK_CLIP = 0.2
_EPS = 1e-10

GABOR_SCALES = 5
GABOR_ORIENT = 8
GABOR_DOWNSAMPLE = 4
FEATURE_KINDS = ("intensity", "lbp", "gabor")


class FeatureError(CrossfaceError):
    pass


class ImageTooSmallError(FeatureError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    """Cell-grid feature array, data row-major of length cells_h*cells_w*dim."""

    cells_w: int
    cells_h: int
    dim: int
    data: np.ndarray
    cell_size: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64).ravel()
        if data.size != self.cells_w * self.cells_h * self.dim:
            raise ValueError("data length mismatch with cell grid")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    def grid(self) -> np.ndarray:
        return self.data.reshape(self.cells_h, self.cells_w, self.dim)


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple  # ((scale, FeatureMap), ...)
    scale_step: float

    def __post_init__(self):
        if not 0.0 < self.scale_step < 1.0:
            raise ValueError("scale_step must lie in (0, 1)")
        scales = [s for s, _ in self.levels]
        if any(b >= a for a, b in zip(scales, scales[1:])):
            raise ValueError("level scales must be strictly decreasing")
        object.__setattr__(self, "levels", tuple(self.levels))


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    dim: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("feature vector contains non-finite values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "dim", v.size)


def _cell_histograms(img: np.ndarray, cell_size: int) -> np.ndarray:
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ori = np.mod(np.arctan2(gy, gx), np.pi)
    obin = ori * (N_ORIENT / np.pi)
    cy, cx = img.shape[0] // cell_size, img.shape[1] // cell_size
    crop_m = mag[:cy * cell_size, :cx * cell_size]
    crop_o = obin[:cy * cell_size, :cx * cell_size]
    return kernels.hog_accumulate(crop_m, crop_o, cy, cx, cell_size, N_ORIENT)


def _block_normalize(hist: np.ndarray) -> np.ndarray:
    cy, cx, nb = hist.shape
    out = np.empty((cy, cx, 4 * nb))
    # block (by, bx) spans cells (by:by+2, bx:bx+2); border indices clamp
    for y in range(cy):
        for x in range(cx):
            for k, (dy, dx) in enumerate(((-1, -1), (-1, 0), (0, -1), (0, 0))):
                by = min(max(y + dy, 0), cy - 2)
                bx = min(max(x + dx, 0), cx - 2)
                block = hist[by:by + 2, bx:bx + 2].ravel()
                n1 = block / np.sqrt((block ** 2).sum() + _EPS ** 2)
                n1 = np.minimum(n1, BLOCK_CLIP)
                n2 = n1 / np.sqrt((n1 ** 2).sum() + _EPS ** 2)
                sy, sx = y - by, x - bx
                out[y, x, k * nb:(k + 1) * nb] = n2.reshape(2, 2, nb)[sy, sx]
    return out


def hog(image, cell_size: int = 8) -> FeatureMap:
    """Block-normalized oriented-gradient cell features of an image."""
    img = as_image(image)
    if cell_size < 1:
        raise ValueError("cell_size must be positive")
    if img.shape[0] < 2 * cell_size or img.shape[1] < 2 * cell_size:
        raise ImageTooSmallError(
            f"image {img.shape} smaller than 2 cells of {cell_size} px")
    hist = _cell_histograms(img, cell_size)
    feat = _block_normalize(hist)
    cy, cx, dim = feat.shape
    return FeatureMap(cx, cy, dim, feat.ravel(), cell_size)


def resample(image, scale: float) -> np.ndarray:
    """Bilinear resample by a scale factor (pixel-center alignment)."""
    img = as_image(image)
    if scale == 1.0:
        return img.copy()
    h = max(int(round(img.shape[0] * scale)), 1)
    w = max(int(round(img.shape[1] * scale)), 1)
    yy = (np.arange(h) + 0.5) * (img.shape[0] / h) - 0.5
    xx = (np.arange(w) + 0.5) * (img.shape[1] / w) - 0.5
    grid = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(img, grid, order=1, mode="nearest")


def max_pyramid_levels(image_shape, scale_step: float, cell_size: int) -> int:
    lo = min(image_shape[0], image_shape[1])
    n = 0
    while int(round(lo * scale_step ** n)) >= 2 * cell_size:
        n += 1
    return n


def build_pyramid(image, levels: int, scale_step: float = 0.8,
                  cell_size: int = 8) -> FeaturePyramid:
    """Feature maps of geometrically rescaled copies, scales {1, s, s^2, ...}."""
    img = as_image(image)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if not 0.0 < scale_step < 1.0:
        raise ValueError("scale_step must lie in (0, 1)")
    feasible = max_pyramid_levels(img.shape, scale_step, cell_size)
    if levels > feasible:
        raise ImageTooSmallError(
            f"{levels} levels underflow the 2-cell minimum; at most {feasible} "
            f"feasible for shape {img.shape}")
    out = []
    for k in range(levels):
        s = scale_step ** k
        out.append((s, hog(resample(img, s) if k else img, cell_size)))
    return FeaturePyramid(tuple(out), scale_step)


# ------------------------------------------------------------- LBP features

def _uniform_lookup() -> np.ndarray:
    lut = np.full(256, 58, dtype=np.int64)
    nxt = 0
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        trans = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        if trans <= 2:
            lut[code] = nxt
            nxt += 1
    assert nxt == 58
    return lut


_LBP_LUT = _uniform_lookup()
LBP_BINS = 59
UNIFORM_ALL_ONES_BIN = int(_LBP_LUT[255])


def lbp_histogram(image) -> np.ndarray:
    """59-bin uniform-pattern histogram, L1-normalized."""
    img = as_image(image)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ImageTooSmallError("lbp needs at least 3x3 pixels")
    codes = kernels.lbp_codes(img)
    hist = np.bincount(_LBP_LUT[codes.ravel()], minlength=LBP_BINS).astype(np.float64)
    return hist / hist.sum()


# ----------------------------------------------------------- Gabor features

def gabor_kernel(scale: int, orient: int) -> np.ndarray:
    """Complex Gabor kernel; wave number pi/2 / sqrt(2)^scale, sigma 2*pi."""
    sigma = 2.0 * np.pi
    k = (np.pi / 2.0) / np.sqrt(2.0) ** scale
    phi = np.pi * orient / GABOR_ORIENT
    kx, ky = k * np.cos(phi), k * np.sin(phi)
    half = int(np.ceil(2.5 * sigma / k))
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    r2 = x ** 2 + y ** 2
    env = (k ** 2 / sigma ** 2) * np.exp(-k ** 2 * r2 / (2.0 * sigma ** 2))
    return env * (np.exp(1j * (kx * x + ky * y)) - np.exp(-sigma ** 2 / 2.0))


def gabor_magnitudes(image) -> np.ndarray:
    """(scales, orients, H', W') magnitude responses, downsampled 4x."""
    img = as_image(image)
    hs = (img.shape[0] + GABOR_DOWNSAMPLE - 1) // GABOR_DOWNSAMPLE
    ws = (img.shape[1] + GABOR_DOWNSAMPLE - 1) // GABOR_DOWNSAMPLE
    out = np.empty((GABOR_SCALES, GABOR_ORIENT, hs, ws))
    for v in range(GABOR_SCALES):
        for u in range(GABOR_ORIENT):
            resp = signal.fftconvolve(img, gabor_kernel(v, u), mode="same")
            out[v, u] = np.abs(resp)[::GABOR_DOWNSAMPLE, ::GABOR_DOWNSAMPLE]
    return out


def extract_feature(image, kind: str) -> FeatureVector:
    """Fixed-dimension descriptor of a size-normalized component image."""
    img = as_image(image)
    if kind == "intensity":
        return FeatureVector(img.ravel())
    if kind == "lbp":
        return FeatureVector(lbp_histogram(img))
    if kind == "gabor":
        return FeatureVector(gabor_magnitudes(img).ravel())
    raise ValueError(f"unknown feature kind {kind!r}; choose from {FEATURE_KINDS}")
