"""Tree-structured part models over feature pyramids.

A model is a tree of parts. Each part carries a linear filter over a patch
of feature cells; each tree edge carries a spring scoring the displacement
between parent and child cells. A configuration assigns every part a cell
location at one pyramid level; its score is the sum of filter responses,
spring scores, and a global bias. Inference maximizes the score with
dynamic programming whose child-to-parent messages are generalized
distance transforms, then thresholds root scores, suppresses overlapping
detections, and backtracks the maximizing cells.

Cell coordinates are (x, y) indices of a patch's top-left cell at a level.
Public locations are patch centers in image pixels; the conversion uses
the level scale and the model cell size and is exact for grid-born points.
Displacements are parent minus child, in cells.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

from . import fileio, kernels
from .core import DEFAULT_SPARSE_INDEX, N_LANDMARKS, CrossfaceError, as_image
from .features import FeaturePyramid, hog, resample

__all__ = [
    "DEFAULT_TREE_PARENTS",
    "DEFAULT_NMS_OVERLAP",
    "TREE_CELL_SIZE",
    "RTSM_PART_CELLS",
    "CTSM_PART_CELLS",
    "TreeModelError",
    "LocationError",
    "SpringCurvatureError",
    "TrainingDataError",
    "Part",
    "Spring",
    "TreeModel",
    "Detection",
    "TrainConfig",
    "score_configuration",
    "dt_message",
    "dp_infer",
    "nms",
    "cascade_detect",
    "train_tsm",
    "tree_model_to_payload",
    "tree_model_from_payload",
    "save_tree_model",
    "load_tree_model",
]

logger = logging.getLogger(__name__)

# Feature-cell edge in pixels for part models; chosen so a 10x10-cell part
# covers a fifth of a 100 px training face.
TREE_CELL_SIZE = 2
RTSM_PART_CELLS = 10
CTSM_PART_CELLS = 6
DEFAULT_NMS_OVERLAP = 0.3

# Sparse-part tree rooted at the nose tip (landmark 30): nose wings under
# the tip, brows and eyes hang off the bridge (27), jaw contour off the eye
# corners, mouth ring off the upper-lip midpoint (51).
DEFAULT_TREE_PARENTS = MappingProxyType({
    30: None,
    31: 30, 35: 30, 27: 30, 51: 30,
    21: 27, 22: 27, 39: 27, 42: 27,
    38: 39, 36: 38, 43: 42, 45: 43,
    0: 36, 16: 45,
    48: 51, 54: 51, 57: 51,
    8: 57,
})


class TreeModelError(CrossfaceError):
    """Structural or usage error in a tree part model."""


class LocationError(TreeModelError):
    """A part location falls outside the valid cell grid."""


class SpringCurvatureError(TreeModelError):
    """Spring quadratic coefficients invalid for the transform fast path."""


class TrainingDataError(TreeModelError):
    """Training examples insufficient or inconsistent."""


# ---------------------------------------------------------------------------
# Model types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Part:
    """One tree node: a linear filter over an (h, w, dim) patch of cells."""

    id: int
    parent: Optional[int]
    filter: np.ndarray
    anchor: tuple = (0.0, 0.0)  # expected child-minus-parent offset, cells

    def __post_init__(self):
        f = np.asarray(self.filter, dtype=np.float64)
        if f.ndim != 3 or min(f.shape) < 1:
            raise ValueError("part filter must be a (h, w, dim) tensor")
        if not np.all(np.isfinite(f)):
            raise ValueError("part filter must be finite")
        if self.parent is not None and self.parent == self.id:
            raise ValueError("part cannot be its own parent")
        object.__setattr__(self, "filter", f)
        object.__setattr__(self, "anchor", (float(self.anchor[0]),
                                            float(self.anchor[1])))

    @property
    def cells(self) -> tuple:
        h, w, _ = self.filter.shape
        return (h, w)


@dataclass(frozen=True)
class Spring:
    """Deformation weights over [dx, dx^2, dy, dy^2], dx = parent - child."""

    child: int
    parent: int
    b: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64).ravel()
        if b.shape != (4,) or not np.all(np.isfinite(b)):
            raise ValueError("spring weights must be a finite 4-vector")
        # Concavity in each axis keeps the maximization bounded.
        if b[1] > 0.0 or b[3] > 0.0:
            raise ValueError("spring quadratic coefficients must be <= 0")
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class TreeModel:
    """Immutable part tree with springs, bias, and landmark bindings."""

    parts: tuple
    springs: tuple
    bias: float
    train_face_size: float
    landmark_map: Mapping[int, int]
    cell_size: int = TREE_CELL_SIZE
    pad: int = 0  # zero-feature margin in cells; lets patches overhang

    def __post_init__(self):
        parts = tuple(self.parts)
        springs = tuple(self.springs)
        if not parts:
            raise ValueError("model needs at least one part")
        ids = [p.id for p in parts]
        if len(set(ids)) != len(ids):
            raise ValueError("part ids must be unique")
        byid = {p.id: p for p in parts}
        roots = [p.id for p in parts if p.parent is None]
        if len(roots) != 1:
            raise ValueError("model must have exactly one root part")
        for p in parts:
            seen = {p.id}
            cur = p
            while cur.parent is not None:
                if cur.parent not in byid:
                    raise ValueError(f"unknown parent id {cur.parent}")
                if cur.parent in seen:
                    raise ValueError("parent links contain a cycle")
                seen.add(cur.parent)
                cur = byid[cur.parent]
        edges = {(p.id, p.parent) for p in parts if p.parent is not None}
        sedges = [(s.child, s.parent) for s in springs]
        if len(set(sedges)) != len(sedges) or set(sedges) != edges:
            raise ValueError("springs must cover exactly the tree edges")
        dims = {p.filter.shape[2] for p in parts}
        if len(dims) != 1:
            raise ValueError("all part filters must share one feature dim")
        if not np.isfinite(self.bias):
            raise ValueError("bias must be finite")
        if not self.train_face_size > 0:
            raise ValueError("train_face_size must be positive")
        if self.cell_size < 1:
            raise ValueError("cell_size must be >= 1")
        if self.pad < 0:
            raise ValueError("pad must be >= 0")
        lmap = dict(self.landmark_map)
        vals = list(lmap.values())
        if len(set(vals)) != len(vals):
            raise ValueError("landmark_map must be injective")
        for pid, li in lmap.items():
            if pid not in byid:
                raise ValueError(f"landmark_map references unknown part {pid}")
            if not 0 <= li < N_LANDMARKS:
                raise ValueError(f"landmark index {li} out of range")
        object.__setattr__(self, "parts", parts)
        object.__setattr__(self, "springs", springs)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "train_face_size",
                           float(self.train_face_size))
        object.__setattr__(self, "landmark_map", MappingProxyType(lmap))

    @property
    def root(self) -> Part:
        return next(p for p in self.parts if p.parent is None)

    @property
    def feature_dim(self) -> int:
        return self.parts[0].filter.shape[2]

    def part_by_id(self, pid: int) -> Part:
        for p in self.parts:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def spring_for(self, child: int) -> Spring:
        for s in self.springs:
            if s.child == child:
                return s
        raise KeyError(child)

    def children_of(self, pid: int) -> tuple:
        return tuple(p.id for p in self.parts if p.parent == pid)

    def dp_order(self) -> list:
        """Part ids with every child listed before its parent."""
        order = []
        seen = set()

        def visit(pid):
            for c in self.children_of(pid):
                visit(c)
            order.append(pid)
            seen.add(pid)

        visit(self.root.id)
        if len(order) != len(self.parts):
            raise ValueError("tree traversal missed parts")
        return order


@dataclass(frozen=True)
class Detection:
    """One scored configuration: part centers in image pixels plus root box."""

    score: float
    locations: Mapping[int, tuple]
    level: int
    box: tuple = (0.0, 0.0, 0.0, 0.0)  # root patch (x0, y0, x1, y1), pixels

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")
        if not self.locations:
            raise ValueError("detection needs at least one part location")
        locs = {int(k): (float(v[0]), float(v[1]))
                for k, v in dict(self.locations).items()}
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "locations", MappingProxyType(locs))
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))


# ---------------------------------------------------------------------------
# Coordinate conversion
# ---------------------------------------------------------------------------

def _cell_to_image(cx, cy, part: Part, scale: float, cell_size: int,
                   pad: int = 0) -> tuple:
    h, w = part.cells
    return (((cx - pad + w / 2.0) * cell_size) / scale,
            ((cy - pad + h / 2.0) * cell_size) / scale)


def _image_to_cell(pt, part: Part, scale: float, cell_size: int,
                   pad: int = 0) -> tuple:
    h, w = part.cells
    cx = pt[0] * scale / cell_size - w / 2.0 + pad
    cy = pt[1] * scale / cell_size - h / 2.0 + pad
    return (int(round(cx)), int(round(cy)))


def _padded(grid: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return grid
    return np.pad(grid, ((pad, pad), (pad, pad), (0, 0)))


def _level(pyramid: FeaturePyramid, level: int, model: TreeModel):
    if not 0 <= level < len(pyramid.levels):
        raise LocationError(f"pyramid level {level} out of range")
    scale, fmap = pyramid.levels[level]
    if fmap.cell_size != model.cell_size:
        raise TreeModelError(
            f"pyramid cell size {fmap.cell_size} != model {model.cell_size}")
    if fmap.dim != model.feature_dim:
        raise TreeModelError(
            f"pyramid feature dim {fmap.dim} != model {model.feature_dim}")
    return scale, fmap


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def score_configuration(model: TreeModel, pyramid: FeaturePyramid,
                        locations: Mapping, level: int) -> float:
    """Exact configuration score: filter responses + springs + bias.

    ``locations`` maps part id to a patch-center point in image pixels;
    points are snapped to the cell grid of the given level. Patches may
    overhang the image by the model's pad margin, where feature cells read
    zero; anything farther out raises :class:`LocationError`.
    """
    scale, fmap = _level(pyramid, level, model)
    grid = _padded(fmap.grid(), model.pad)
    ch, cw = grid.shape[:2]
    cells = {}
    total = model.bias
    for part in model.parts:
        if part.id not in locations:
            raise ValueError(f"missing location for part {part.id}")
        cx, cy = _image_to_cell(locations[part.id], part, scale,
                                model.cell_size, model.pad)
        h, w, _ = part.filter.shape
        if not (0 <= cx <= cw - w and 0 <= cy <= ch - h):
            raise LocationError(
                f"part {part.id} patch at cell ({cx}, {cy}) leaves the "
                f"padded {ch}x{cw} grid")
        cells[part.id] = (cx, cy)
        total += float(np.sum(part.filter * grid[cy:cy + h, cx:cx + w, :]))
    for s in model.springs:
        dx = cells[s.parent][0] - cells[s.child][0]
        dy = cells[s.parent][1] - cells[s.child][1]
        total += float(s.b[0] * dx + s.b[1] * dx * dx
                       + s.b[2] * dy + s.b[3] * dy * dy)
    return float(total)


# ---------------------------------------------------------------------------
# Spring messages via generalized distance transforms
# ---------------------------------------------------------------------------

def _dt_message_full(child_scores: np.ndarray, spring: Spring,
                     parent_shape=None):
    b = spring.b
    if not (b[1] < 0.0 and b[3] < 0.0):
        raise SpringCurvatureError(
            "transform fast path needs strictly negative quadratic weights")
    g = np.ascontiguousarray(child_scores, dtype=np.float64)
    if g.ndim != 2 or min(g.shape) < 1:
        raise ValueError("child score map must be a 2-D array")
    hp, wp = parent_shape if parent_shape is not None else g.shape
    return kernels.dt_message_grid(g, b[0], b[1], b[2], b[3],
                                   int(hp), int(wp))


def dt_message(child_scores: np.ndarray, spring: Spring,
               parent_shape=None) -> np.ndarray:
    """Best child score plus spring score for every parent cell.

    Computed in O(cells) with separable 1-D lower envelopes; equals the
    quadratic-time maximum. Requires strictly negative quadratic weights.
    """
    msg, _, _ = _dt_message_full(child_scores, spring, parent_shape)
    return msg


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _message_any(child_scores: np.ndarray, spring: Spring, parent_shape):
    """Spring message with a quadratic-time fallback for flat springs."""
    b = spring.b
    if b[1] < 0.0 and b[3] < 0.0:
        return _dt_message_full(child_scores, spring, parent_shape)
    g = np.ascontiguousarray(child_scores, dtype=np.float64)
    hp, wp = parent_shape
    return kernels.dt_message_grid_np(g, b[0], b[1], b[2], b[3], hp, wp)


def _level_candidates(model: TreeModel, grid: np.ndarray, threshold: float):
    """Root-score map and backtracking tables for one feature grid."""
    ch, cw, _ = grid.shape
    resp = {}
    for part in model.parts:
        h, w, _ = part.filter.shape
        if ch < h or cw < w:
            return None
        resp[part.id] = kernels.correlate_filter(grid, part.filter)
    args = {}
    for pid in model.dp_order():
        part = model.part_by_id(pid)
        if part.parent is None:
            continue
        pshape = resp[part.parent].shape
        msg, argy, argx = _message_any(resp[pid], model.spring_for(pid),
                                       pshape)
        resp[part.parent] = resp[part.parent] + msg
        args[pid] = (argy, argx)
    g0 = resp[model.root.id] + model.bias
    keep = np.argwhere(g0 >= threshold)
    return g0, args, [(int(y), int(x)) for y, x in keep]


def _backtrack(model: TreeModel, args, root_cell) -> dict:
    cells = {model.root.id: root_cell}
    stack = [model.root.id]
    while stack:
        pid = stack.pop()
        py, px = cells[pid]
        for cid in model.children_of(pid):
            argy, argx = args[cid]
            cells[cid] = (int(argy[py, px]), int(argx[py, px]))
            stack.append(cid)
    return cells


def dp_infer(model: TreeModel, pyramid: FeaturePyramid, threshold: float,
             overlap: float = DEFAULT_NMS_OVERLAP,
             levels: Optional[Sequence[int]] = None) -> list:
    """All above-threshold detections after non-maximum suppression.

    Messages flow child to parent through distance transforms; root cells
    scoring at least ``threshold`` are backtracked to full configurations.
    Suppression runs once over the candidates of every searched level.
    Levels too small to fit every part filter yield no candidates.
    """
    if levels is None:
        levels = range(len(pyramid.levels))
    raw = []
    for lv in levels:
        scale, fmap = _level(pyramid, lv, model)
        out = _level_candidates(model, _padded(fmap.grid(), model.pad),
                                threshold)
        if out is None:
            continue
        g0, args, cand = out
        rh, rw, _ = model.root.filter.shape
        cs = model.cell_size
        pad = model.pad
        for (py, px) in cand:
            cells = _backtrack(model, args, (py, px))
            locs = {pid: _cell_to_image(cx, cy, model.part_by_id(pid),
                                        scale, cs, pad)
                    for pid, (cy, cx) in cells.items()}
            box = ((px - pad) * cs / scale, (py - pad) * cs / scale,
                   (px - pad + rw) * cs / scale, (py - pad + rh) * cs / scale)
            raw.append(Detection(float(g0[py, px]), locs, lv, box))
    raw.sort(key=lambda d: (-d.score, d.level, d.box[1], d.box[0]))
    return nms(raw, overlap)


def _iou(a: tuple, b: tuple) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def nms(detections: Sequence[Detection], overlap: float) -> list:
    """Greedy suppression of root boxes by intersection-over-union."""
    if not 0.0 < overlap < 1.0:
        raise ValueError("overlap must lie in (0, 1)")
    order = sorted(detections,
                   key=lambda d: (-d.score, d.level, d.box[1], d.box[0]))
    kept = []
    for det in order:
        if all(_iou(det.box, k.box) <= overlap for k in kept):
            kept.append(det)
    return kept


def cascade_detect(coarse: TreeModel, fine: TreeModel,
                   pyramid: FeaturePyramid, threshold: float,
                   proposal_threshold: float,
                   overlap: float = DEFAULT_NMS_OVERLAP) -> list:
    """Two-stage search: coarse proposals restrict the fine model's levels.

    Each coarse detection at level scale ``s`` implies a face about
    ``coarse.train_face_size / s`` pixels wide; the fine model then
    searches only the level nearest its own matching scale plus the two
    adjacent levels.
    """
    proposals = dp_infer(coarse, pyramid, proposal_threshold, overlap)
    if not proposals:
        return []
    scales = np.array([s for s, _ in pyramid.levels])
    levels = set()
    for det in proposals:
        s_prop = scales[det.level]
        face_px = coarse.train_face_size / s_prop
        target = fine.train_face_size / face_px
        k = int(np.argmin(np.abs(np.log(scales) - np.log(target))))
        levels.update(k + d for d in (-1, 0, 1)
                      if 0 <= k + d < len(scales))
    return dp_infer(fine, pyramid, threshold, overlap, sorted(levels))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Knobs for part-model training."""

    part_cells: int = RTSM_PART_CELLS
    cell_size: int = TREE_CELL_SIZE
    pad: Optional[int] = None  # default: half the part size
    scale_factor: float = 0.5  # training images are downscaled by this
    sparse_index: tuple = DEFAULT_SPARSE_INDEX
    parent_map: Optional[Mapping] = None
    min_examples: int = 2
    ridge: float = 0.1
    mining_rounds: int = 2
    negatives_per_part: int = 20
    variance_floor: float = 0.25  # cells^2
    variance_ceiling: float = 1e4
    seed: int = 0
    negative_images: tuple = ()

    def parents(self) -> Mapping:
        if self.parent_map is not None:
            return dict(self.parent_map)
        if tuple(self.sparse_index) == DEFAULT_SPARSE_INDEX:
            return dict(DEFAULT_TREE_PARENTS)
        # Fallback for custom part sets: star rooted at the first id.
        root = self.sparse_index[0]
        return {i: (None if i == root else root) for i in self.sparse_index}


def _positive_cells(points: np.ndarray, idx: Sequence[int], cells_hw: tuple,
                    grid_shape: tuple, cell_size: int, pad: int) -> dict:
    h, w = cells_hw
    ch, cw, _ = grid_shape
    if cw < w or ch < h:
        raise TrainingDataError("image too small for the part size")
    out = {}
    for li in idx:
        x, y = points[li]
        if not (np.isfinite(x) and np.isfinite(y)):
            raise TrainingDataError(f"landmark {li} not annotated")
        cx = int(round(x / cell_size - w / 2.0)) + pad
        cy = int(round(y / cell_size - h / 2.0)) + pad
        cx = min(max(cx, 0), cw - w)
        cy = min(max(cy, 0), ch - h)
        out[li] = (cx, cy)
    return out


def _patch(grid: np.ndarray, cell: tuple, h: int, w: int) -> np.ndarray:
    cx, cy = cell
    return grid[cy:cy + h, cx:cx + w, :].ravel()


def _random_negative_cells(rng, grid_shape, h, w, count, exclude=None,
                           radius=0):
    ch, cw, _ = grid_shape
    ys = np.arange(0, ch - h + 1)
    xs = np.arange(0, cw - w + 1)
    cells = []
    tries = 0
    while len(cells) < count and tries < count * 20:
        tries += 1
        cy = int(rng.choice(ys))
        cx = int(rng.choice(xs))
        if exclude is not None:
            ex, ey = exclude
            if abs(cx - ex) <= radius and abs(cy - ey) <= radius:
                continue
        cells.append((cx, cy))
    return cells


def _fit_filter(pos: np.ndarray, neg: np.ndarray, lam: float) -> np.ndarray:
    # Class-balanced regularized least squares to +-1 targets.
    n = len(pos) + len(neg)
    wp = np.sqrt(n / (2.0 * len(pos)))
    wn = np.sqrt(n / (2.0 * max(len(neg), 1)))
    X = np.vstack([wp * pos, wn * neg])
    y = np.concatenate([np.full(len(pos), wp), np.full(len(neg), -wn)])
    d = X.shape[1]
    reg = lam * n
    if n < d:
        # Dual form: (X'X + rI)^-1 X'y == X'(XX' + rI)^-1 y.
        return X.T @ np.linalg.solve(X @ X.T + reg * np.eye(n), y)
    return np.linalg.solve(X.T @ X + reg * np.eye(d), X.T @ y)


def _mine_hard(w: np.ndarray, grid: np.ndarray, filt_shape, true_cell,
               radius, count) -> list:
    resp = kernels.correlate_filter(grid, w.reshape(filt_shape))
    ex, ey = true_cell
    ys, xs = np.mgrid[0:resp.shape[0], 0:resp.shape[1]]
    near = (np.abs(xs - ex) <= radius) & (np.abs(ys - ey) <= radius)
    resp = np.where(near, -np.inf, resp)
    flat = np.argsort(resp.ravel())[::-1][:count]
    out = []
    for f in flat:
        cy, cx = divmod(int(f), resp.shape[1])
        if np.isfinite(resp[cy, cx]):
            out.append((cx, cy))
    return out


def train_tsm(examples: Sequence, config: TrainConfig = TrainConfig()) -> dict:
    """One part model per yaw bucket from annotated face crops.

    Each example is ``(image, LandmarkSet, yaw_bucket)``. Images are
    downscaled by ``config.scale_factor`` before feature extraction, so the
    stored face size is the scaled mean crop height. Filters come from
    ridge-regularized linear classification of the annotated patches
    against randomly seeded then hard-mined negatives; springs are
    maximum-likelihood Gaussian fits of the parent-child cell offsets with
    a variance floor. Buckets below ``config.min_examples`` raise
    :class:`TrainingDataError`.
    """
    buckets = {}
    for img, lms, bucket in examples:
        buckets.setdefault(int(bucket), []).append((img, lms))
    if not buckets:
        raise TrainingDataError("no training examples supplied")
    parents = config.parents()
    idx = tuple(config.sparse_index)
    if set(parents) != set(idx):
        raise TrainingDataError("parent map must cover the sparse part set")
    models = {}
    for bucket in sorted(buckets):
        models[bucket] = _train_bucket(buckets[bucket], parents, idx, config)
    return models


def _train_bucket(pairs, parents, idx, config: TrainConfig) -> TreeModel:
    if len(pairs) < config.min_examples:
        raise TrainingDataError(
            f"bucket has {len(pairs)} examples; needs {config.min_examples}")
    hw = (config.part_cells, config.part_cells)
    h = w = config.part_cells
    cs = config.cell_size
    sf = config.scale_factor
    pad = config.part_cells // 2 if config.pad is None else config.pad
    rng = np.random.RandomState(config.seed)

    grids, cellmaps, heights = [], [], []
    for img, lms in pairs:
        im = as_image(img)
        im2 = resample(im, sf) if sf != 1.0 else im
        grid = _padded(hog(im2, cs).grid(), pad)
        pts = np.asarray(lms.points, dtype=np.float64) * sf
        cellmaps.append(_positive_cells(pts, idx, hw, grid.shape, cs, pad))
        grids.append(grid)
        heights.append(im2.shape[0])
    neg_grids = [_padded(hog(resample(as_image(n), sf) if sf != 1.0
                             else as_image(n), cs).grid(), pad)
                 for n in config.negative_images]

    dim = grids[0].shape[2]
    # Patches overlapping the annotated one by half or more are not mined.
    radius = max(1, config.part_cells)
    filters = {}
    violations = 0
    for li in idx:
        pos = np.array([_patch(g, cm[li], h, w)
                        for g, cm in zip(grids, cellmaps)])
        negs = []
        for g, cm in zip(grids, cellmaps):
            for cell in _random_negative_cells(
                    rng, g.shape, h, w, config.negatives_per_part,
                    exclude=cm[li], radius=radius):
                negs.append(_patch(g, cell, h, w))
        for g in neg_grids:
            for cell in _random_negative_cells(
                    rng, g.shape, h, w, config.negatives_per_part):
                negs.append(_patch(g, cell, h, w))
        neg = np.array(negs) if negs else np.zeros((1, pos.shape[1]))
        wvec = _fit_filter(pos, neg, config.ridge)
        for _ in range(config.mining_rounds):
            mined = []
            for g, cm in zip(grids, cellmaps):
                for cell in _mine_hard(wvec, g, (h, w, dim), cm[li],
                                       radius, config.negatives_per_part):
                    mined.append(_patch(g, cell, h, w))
            for g in neg_grids:
                for cell in _mine_hard(wvec, g, (h, w, dim), (-10, -10),
                                       0, config.negatives_per_part):
                    mined.append(_patch(g, cell, h, w))
            if mined:
                neg = np.vstack([neg, np.array(mined)])
            wvec = _fit_filter(pos, neg, config.ridge)
        worst_neg = float(np.max(neg @ wvec)) if len(neg) else -np.inf
        violations += int(np.sum(pos @ wvec <= worst_neg))
        filters[li] = wvec.reshape(h, w, dim)
    logger.info("trained %d parts; %d positive patches not above every "
                "mined negative", len(idx), violations)

    springs = []
    bias = 0.0
    anchors = {li: (0.0, 0.0) for li in idx}
    for li in idx:
        par = parents[li]
        if par is None:
            continue
        dxy = np.array([[cm[par][0] - cm[li][0], cm[par][1] - cm[li][1]]
                        for cm in cellmaps], dtype=np.float64)
        mu = dxy.mean(axis=0)
        var = np.clip(dxy.var(axis=0), config.variance_floor,
                      config.variance_ceiling)
        b = np.array([mu[0] / var[0], -0.5 / var[0],
                      mu[1] / var[1], -0.5 / var[1]])
        # Constant completing each squared term lands in the global bias,
        # so a configuration at the mean offsets scores zero deformation.
        bias -= 0.5 * (mu[0] ** 2 / var[0] + mu[1] ** 2 / var[1])
        springs.append(Spring(li, par, b))
        anchors[li] = (-float(mu[0]), -float(mu[1]))

    parts = tuple(Part(li, parents[li], filters[li], anchors[li])
                  for li in idx)
    return TreeModel(parts, tuple(springs), bias,
                     float(np.mean(heights)), {li: li for li in idx}, cs, pad)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def tree_model_to_payload(model: TreeModel) -> dict:
    return {
        "parts": [{"id": p.id,
                   "parent": p.parent,
                   "anchor": [p.anchor[0], p.anchor[1]],
                   "filter": fileio.encode_array(p.filter)}
                  for p in model.parts],
        "springs": [{"child": s.child, "parent": s.parent,
                     "b": fileio.encode_array(s.b)}
                    for s in model.springs],
        "bias": model.bias,
        "train_face_size": model.train_face_size,
        "cell_size": model.cell_size,
        "pad": model.pad,
        "landmark_map": {str(k): v for k, v in model.landmark_map.items()},
    }


def tree_model_from_payload(payload: dict) -> TreeModel:
    try:
        parts = tuple(Part(int(p["id"]),
                           None if p["parent"] is None else int(p["parent"]),
                           fileio.decode_array(p["filter"]),
                           tuple(p.get("anchor", (0.0, 0.0))))
                      for p in payload["parts"])
        springs = tuple(Spring(int(s["child"]), int(s["parent"]),
                               fileio.decode_array(s["b"]))
                        for s in payload["springs"])
        lmap = {int(k): int(v) for k, v in payload["landmark_map"].items()}
        return TreeModel(parts, springs, float(payload["bias"]),
                         float(payload["train_face_size"]), lmap,
                         int(payload.get("cell_size", TREE_CELL_SIZE)),
                         int(payload.get("pad", 0)))
    except (KeyError, TypeError, ValueError) as e:
        raise fileio.FormatError(f"bad tree model payload: {e}") from e


def save_tree_model(path, model: TreeModel) -> None:
    fileio.write_model_json(path, "tree_model", tree_model_to_payload(model))


def load_tree_model(path) -> TreeModel:
    return tree_model_from_payload(fileio.read_model_json(path, "tree_model"))
