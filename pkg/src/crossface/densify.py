"""Sparse-to-dense landmark regression with low-error re-selection.

A bank of epsilon-insensitive support vector regressors with a degree-2
polynomial kernel maps the sparse landmark coordinates of a face to every
remaining dense landmark. A second bank takes the sparse set plus a fixed
low-error subset of the first-pass predictions as input and re-predicts
the dense set; iterating the second bank until the mean point displacement
stalls refines the layout. Landmarks are regressed in a face-centric frame
(translated to the sparse centroid, scaled by the sparse RMS radius) so
the maps are similarity-invariant.

The package solver minimizes the squared epsilon-insensitive objective in
kernel form with active-set Newton steps; tests cross-check it against an
exact quadratic program for the standard dual.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

from . import fileio
from .core import (
    DEFAULT_SPARSE_INDEX,
    N_LANDMARKS,
    YAW_GRID,
    CrossfaceError,
    LandmarkSet,
)

__all__ = [
    "BrmError",
    "DimensionError",
    "MissingBucketError",
    "TrainingDataError",
    "SvrModel",
    "BucketRegressor",
    "BrmModel",
    "BrmTrainConfig",
    "poly_kernel",
    "svr_predict",
    "fit_kernel_svr",
    "train_brm",
    "brm_refine",
    "brm_model_to_payload",
    "brm_model_from_payload",
    "save_brm_model",
    "load_brm_model",
]

logger = logging.getLogger(__name__)

# Face size for relative thresholds, as a multiple of the sparse RMS radius.
FACE_SIZE_PER_RMS = 2.0
DEFAULT_EPSILON = 0.002
DEFAULT_C = 1000.0
LOW_ERROR_FRACTION = 0.3
MAX_REFINE_ITER = 8
REFINE_TOL = 1e-4


class BrmError(CrossfaceError):
    """Errors from the dense-landmark regression stage."""


class DimensionError(BrmError):
    """Input vector length does not match the regressor."""


class MissingBucketError(BrmError):
    """No regressor trained for the requested yaw bucket."""


class TrainingDataError(BrmError):
    """Training examples insufficient or inconsistent."""


# ---------------------------------------------------------------------------
# Kernel regressor
# ---------------------------------------------------------------------------

def poly_kernel(x: np.ndarray, y: np.ndarray, gain: float,
                offset: float) -> np.ndarray:
    """Degree-2 polynomial kernel (gain * <x, y> + offset)^2, vectorized."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    return (gain * (x @ y.T) + offset) ** 2


@dataclass(frozen=True)
class SvrModel:
    """Kernel expansion for one output coordinate of one dense landmark."""

    support_vectors: np.ndarray
    coefficients: np.ndarray
    bias: float
    gain: float
    offset: float
    input_dim: int
    output_landmark: int
    output_coord: int  # 0 for x, 1 for y

    def __post_init__(self):
        sv = np.asarray(self.support_vectors, dtype=np.float64)
        co = np.asarray(self.coefficients, dtype=np.float64).ravel()
        if sv.ndim != 2 or sv.shape[0] != co.shape[0]:
            raise ValueError("one coefficient per support vector required")
        if sv.shape[1] != self.input_dim:
            raise ValueError("support vector length != input_dim")
        if not (np.all(np.isfinite(sv)) and np.all(np.isfinite(co))
                and np.isfinite(self.bias)):
            raise ValueError("regressor parameters must be finite")
        if self.output_coord not in (0, 1):
            raise ValueError("output_coord must be 0 or 1")
        object.__setattr__(self, "support_vectors", sv)
        object.__setattr__(self, "coefficients", co)
        object.__setattr__(self, "bias", float(self.bias))


def svr_predict(model: SvrModel, x) -> float:
    """Kernel expansion sum(coef_i * K(x, sv_i)) + bias."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != model.input_dim:
        raise DimensionError(
            f"input length {x.shape[0]} != model dim {model.input_dim}")
    if model.coefficients.size == 0:
        return model.bias
    k = poly_kernel(x[None, :], model.support_vectors, model.gain,
                    model.offset)[0]
    return float(k @ model.coefficients + model.bias)


def _svr_objective(K, y, c, b, C, epsilon):
    slack = np.maximum(0.0, np.abs(y - K @ c - b) - epsilon)
    return 0.5 * c @ (K @ c) + C * np.sum(slack ** 2)


def fit_kernel_svr(K: np.ndarray, Y: np.ndarray, C: float,
                   epsilon: float) -> tuple:
    """Multi-target kernel regression under squared epsilon-insensitive loss.

    Minimizes 0.5 * c'Kc + C * sum(max(0, |y - Kc - b| - eps)^2) per column
    of ``Y``; returns (coef matrix (n, T), bias vector (T,)).

    The loss is piecewise quadratic, so each column is solved by active-set
    Newton steps: points outside the tube form the active set, the exact
    minimizer for that set follows from one bordered SPD solve, and the set
    is re-derived from the new residuals until it stops changing. A
    backtracking guard keeps the true objective decreasing.
    """
    K = np.asarray(K, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, T = Y.shape
    cm = np.zeros((n, T))
    bias = np.zeros(T)
    for t in range(T):
        y = Y[:, t]
        c = np.zeros(n)
        b = float(np.mean(y))
        obj = _svr_objective(K, y, c, b, C, epsilon)
        for _ in range(200):
            r = y - K @ c - b
            active = np.abs(r) > epsilon
            if not np.any(active):
                c_new = np.zeros(n)
                b_new = b
            else:
                s = np.sign(r[active])
                ytil = y[active] - epsilon * s
                na = int(active.sum())
                m = np.empty((na + 1, na + 1))
                m[:na, :na] = K[np.ix_(active, active)]
                m[:na, :na] += np.eye(na) / (2.0 * C)
                m[:na, na] = 1.0
                m[na, :na] = 1.0
                m[na, na] = 0.0
                sol = np.linalg.solve(m, np.append(ytil, 0.0))
                c_new = np.zeros(n)
                c_new[active] = sol[:na]
                b_new = float(sol[na])
            step = np.max(np.abs(c_new - c)) + abs(b_new - b)
            if step < 1e-12:
                break
            beta = 1.0
            while beta > 1e-6:
                c_try = c + beta * (c_new - c)
                b_try = b + beta * (b_new - b)
                obj_try = _svr_objective(K, y, c_try, b_try, C, epsilon)
                if obj_try <= obj + 1e-12:
                    break
                beta *= 0.5
            if beta <= 1e-6:
                break
            c, b, obj = c_try, b_try, obj_try
        cm[:, t] = c
        bias[t] = b
    return cm, bias


# ---------------------------------------------------------------------------
# Model containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BucketRegressor:
    """All regressors for one yaw bucket, both passes."""

    input_index: tuple  # landmark ids consumed by the first pass
    target_index: tuple  # landmark ids predicted (everything non-sparse)
    low_error_index: tuple  # target subset re-used as second-pass input
    stage1: tuple  # SvrModel per (target, coord)
    stage2: tuple
    residuals: np.ndarray  # per-landmark cross-validation residual

    def __post_init__(self):
        res = np.asarray(self.residuals, dtype=np.float64)
        if res.shape != (N_LANDMARKS,):
            raise ValueError("residuals must cover every landmark index")
        known = ~np.isnan(res)
        if np.any(res[known] < 0):
            raise ValueError("residual statistics must be non-negative")
        if not set(self.low_error_index) <= set(self.target_index):
            raise ValueError("low-error subset must be predicted landmarks")
        if len(self.stage1) != 2 * len(self.target_index):
            raise ValueError("first pass must cover every target coordinate")
        object.__setattr__(self, "input_index", tuple(self.input_index))
        object.__setattr__(self, "target_index", tuple(self.target_index))
        object.__setattr__(self, "low_error_index",
                           tuple(self.low_error_index))
        object.__setattr__(self, "residuals", res)


@dataclass(frozen=True)
class BrmModel:
    """Per-bucket landmark densification regressors."""

    buckets: Mapping[int, BucketRegressor]
    sparse_index: tuple = DEFAULT_SPARSE_INDEX
    low_error_fraction: float = LOW_ERROR_FRACTION
    max_iterations: int = MAX_REFINE_ITER
    convergence_tol: float = REFINE_TOL

    def __post_init__(self):
        if not self.buckets:
            raise ValueError("model needs at least one yaw bucket")
        if not 0.0 < self.low_error_fraction < 1.0:
            raise ValueError("low_error_fraction must lie in (0, 1)")
        if self.max_iterations < 1 or self.convergence_tol <= 0:
            raise ValueError("refinement limits must be positive")
        object.__setattr__(self, "buckets",
                           MappingProxyType(dict(self.buckets)))
        object.__setattr__(self, "sparse_index", tuple(self.sparse_index))


@dataclass(frozen=True)
class BrmTrainConfig:
    """Knobs for landmark-regression training."""

    sparse_index: tuple = DEFAULT_SPARSE_INDEX
    epsilon: float = DEFAULT_EPSILON
    C: float = DEFAULT_C
    low_error_fraction: float = LOW_ERROR_FRACTION
    max_iterations: int = MAX_REFINE_ITER
    convergence_tol: float = REFINE_TOL
    min_examples: int = 4
    cv_folds: int = 5
    gain: Optional[float] = None  # default 1 / input_dim
    offset: float = 1.0
    # Each shape also enters with jittered sparse inputs so the regressors
    # see detector-like noise; sigma is a fraction of the face size.
    noise_augment: float = 0.01
    augment_copies: int = 3
    seed: int = 0
    # The re-prediction pass has a wider input, so it gets a stronger
    # regularizer to keep its estimation variance below the first pass.
    stage2_C_scale: float = 0.25


# ---------------------------------------------------------------------------
# Normalization helpers
# ---------------------------------------------------------------------------

def _norm_frame(points: np.ndarray, index: Sequence[int]) -> tuple:
    pts = points[list(index)]
    if not np.all(np.isfinite(pts)):
        raise BrmError("required landmarks are not populated")
    center = pts.mean(axis=0)
    scale = float(np.sqrt(np.mean(np.sum((pts - center) ** 2, axis=1))))
    if scale <= 0:
        raise BrmError("degenerate landmark layout (zero radius)")
    return center, scale


def _encode(points: np.ndarray, index: Sequence[int], center,
            scale) -> np.ndarray:
    return ((points[list(index)] - center) / scale).ravel()


def _bucket_of(yaw_deg: float) -> int:
    yaw = min(max(float(yaw_deg), YAW_GRID[0]), YAW_GRID[-1])
    return int(min(YAW_GRID, key=lambda g: (abs(g - yaw), g)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _visible_everywhere(shapes: Sequence[LandmarkSet]) -> np.ndarray:
    vis = np.ones(N_LANDMARKS, dtype=bool)
    for s in shapes:
        vis &= s.visible
    return vis


def _design(shapes, input_index, target_index, frame_index=None):
    # The frame always comes from the sparse set so both passes share it.
    frame_index = input_index if frame_index is None else frame_index
    X, Y = [], []
    for s in shapes:
        center, scale = _norm_frame(s.points, frame_index)
        X.append(_encode(s.points, input_index, center, scale))
        Y.append(_encode(s.points, target_index, center, scale))
    return np.array(X), np.array(Y)


def _models_from_fit(X, cm, b, gain, offset, target_index):
    out = []
    for t, li in enumerate(np.repeat(target_index, 2)):
        out.append(SvrModel(X, cm[:, t], float(b[t]), gain, offset,
                            X.shape[1], int(li), t % 2))
    return tuple(out)


def _predict_bank(bank: Sequence[SvrModel], x: np.ndarray) -> np.ndarray:
    """Stacked prediction of a bank sharing one input vector."""
    sv = bank[0].support_vectors
    k = poly_kernel(x[None, :], sv, bank[0].gain, bank[0].offset)[0]
    cm = np.stack([m.coefficients for m in bank], axis=1)
    bias = np.array([m.bias for m in bank])
    return k @ cm + bias


def _cv_predictions(X, Y, C, epsilon, fold_of, gain, offset):
    """Held-out first-pass predictions and per-landmark residuals.

    ``fold_of`` labels each row; all augmented copies of one base shape
    share a label, so no model is scored on a shape it trained on.
    """
    n = len(X)
    pred = np.zeros_like(Y)
    idx = np.arange(n)
    for f in np.unique(fold_of):
        test = idx[fold_of == f]
        train = idx[fold_of != f]
        if len(train) == 0:
            pred[test] = Y[test]
            continue
        K = poly_kernel(X[train], X[train], gain, offset)
        cm, b = fit_kernel_svr(K, Y[train], C, epsilon)
        Kt = poly_kernel(X[test], X[train], gain, offset)
        pred[test] = Kt @ cm + b
    diff = (pred - Y).reshape(n, -1, 2)
    return pred, np.linalg.norm(diff, axis=2).mean(axis=0)


def train_brm(examples: Mapping[int, Sequence[LandmarkSet]],
              config: BrmTrainConfig = BrmTrainConfig()) -> BrmModel:
    """Fit both regressor banks and the low-error subset per yaw bucket.

    ``examples`` maps a yaw bucket to its training shapes. Only landmarks
    visible in every shape of a bucket are used there; the first pass maps
    the visible sparse set to every other visible landmark, and the second
    pass adds the lowest cross-validation-residual targets as inputs.
    """
    if not examples:
        raise TrainingDataError("no training shapes supplied")
    sparse = tuple(config.sparse_index)
    buckets = {}
    for bucket, shapes in sorted(examples.items()):
        shapes = list(shapes)
        if len(shapes) < config.min_examples:
            raise TrainingDataError(
                f"bucket {bucket} has {len(shapes)} shapes; needs "
                f"{config.min_examples}")
        vis = _visible_everywhere(shapes)
        input_index = tuple(i for i in sparse if vis[i])
        target_index = tuple(i for i in range(N_LANDMARKS)
                             if vis[i] and i not in sparse)
        if len(input_index) < 3 or not target_index:
            raise TrainingDataError(
                f"bucket {bucket} lacks visible landmarks to regress")

        # Augmented design: clean copy plus jittered-sparse copies, targets
        # always the true layout encoded in the jittered input frame.
        rng = np.random.RandomState(config.seed * 1009 + bucket + 90)
        copies = max(1, config.augment_copies)
        X_rows, Y_rows, base = [], [], []
        ii = list(input_index)
        for i, s in enumerate(shapes):
            c0, s0 = _norm_frame(s.points, input_index)
            sigma = config.noise_augment * FACE_SIZE_PER_RMS * s0
            for r in range(copies):
                pts = s.points.copy()
                if r > 0:
                    pts[ii] = pts[ii] + rng.randn(len(ii), 2) * sigma
                center, scale = _norm_frame(pts, input_index)
                X_rows.append(_encode(pts, input_index, center, scale))
                Y_rows.append(_encode(s.points, target_index, center, scale))
                base.append(i)
        X = np.array(X_rows)
        Y = np.array(Y_rows)
        folds = max(2, min(config.cv_folds, len(shapes)))
        fold_of = np.array(base) % folds
        gain = config.gain if config.gain is not None else 1.0 / X.shape[1]

        K = poly_kernel(X, X, gain, config.offset)
        cm, b = fit_kernel_svr(K, Y, config.C, config.epsilon)
        stage1 = _models_from_fit(X, cm, b, gain, config.offset,
                                  target_index)

        cv_pred, res_t = _cv_predictions(X, Y, config.C, config.epsilon,
                                         fold_of, gain, config.offset)
        residuals = np.full(N_LANDMARKS, np.nan)
        residuals[list(target_index)] = res_t
        residuals[list(input_index)] = 0.0

        n_low = max(1, int(round(config.low_error_fraction
                                 * len(target_index))))
        order = np.argsort(res_t, kind="stable")
        low_error = tuple(sorted(target_index[i] for i in order[:n_low]))

        # The second pass trains on held-out first-pass positions for the
        # low-error inputs, matching what it will be fed at runtime.
        input2 = tuple(sorted(set(input_index) | set(low_error)))
        X2 = np.empty((len(X), 2 * len(input2)))
        for k, li in enumerate(input2):
            if li in input_index:
                j = input_index.index(li)
                X2[:, 2 * k:2 * k + 2] = X[:, 2 * j:2 * j + 2]
            else:
                t = target_index.index(li)
                X2[:, 2 * k] = cv_pred[:, 2 * t]
                X2[:, 2 * k + 1] = cv_pred[:, 2 * t + 1]
        gain2 = config.gain if config.gain is not None else 1.0 / X2.shape[1]
        K2 = poly_kernel(X2, X2, gain2, config.offset)
        cm2, b2 = fit_kernel_svr(K2, Y, config.C * config.stage2_C_scale,
                                 config.epsilon)
        stage2 = _models_from_fit(X2, cm2, b2, gain2, config.offset,
                                  target_index)

        buckets[int(bucket)] = BucketRegressor(
            input_index, target_index, low_error, stage1, stage2, residuals)
        logger.info("bucket %d: %d inputs -> %d targets, %d low-error",
                    bucket, len(input_index), len(target_index),
                    len(low_error))
    return BrmModel(buckets, sparse, config.low_error_fraction,
                    config.max_iterations, config.convergence_tol)


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

def brm_refine(brm: BrmModel, sparse: LandmarkSet, yaw_deg: float,
               history: Optional[list] = None) -> LandmarkSet:
    """Densify a sparse landmark set and iterate the low-error re-input loop.

    The first pass predicts every covered landmark from the sparse set; each
    following pass feeds the sparse set plus the bucket's fixed low-error
    subset (at their latest positions) to the second bank. Iteration stops
    when the mean displacement drops below the model threshold, else at the
    iteration cap with a warning. ``history`` (if given) collects the mean
    displacement per pass, in input units. Sparse landmarks pass through
    unchanged.
    """
    bucket = _bucket_of(yaw_deg)
    if bucket not in brm.buckets:
        raise MissingBucketError(f"no regressor for yaw bucket {bucket}")
    reg = brm.buckets[bucket]
    pts = np.asarray(sparse.points, dtype=np.float64).copy()
    center, scale = _norm_frame(pts, reg.input_index)

    x1 = _encode(pts, reg.input_index, center, scale)
    if x1.shape[0] != reg.stage1[0].input_dim:
        raise DimensionError("sparse layout does not match the bucket")
    dense = _predict_bank(reg.stage1, x1).reshape(-1, 2)

    input2 = tuple(sorted(set(reg.input_index) | set(reg.low_error_index)))
    tpos = {li: k for k, li in enumerate(reg.target_index)}
    converged = False
    for _ in range(brm.max_iterations):
        full = pts.copy()
        full[list(reg.target_index)] = dense * scale + center
        x2 = np.concatenate([
            (full[li] - center) / scale for li in input2])
        new = _predict_bank(reg.stage2, x2).reshape(-1, 2)
        disp = float(np.mean(np.linalg.norm(new - dense, axis=1)))
        if history is not None:
            history.append(disp * scale)
        if disp < brm.convergence_tol:
            # A sub-threshold update is noise by definition; keep the
            # current layout so a huge threshold degenerates to one pass.
            converged = True
            break
        dense = new
    if not converged:
        logger.warning("refinement stopped at the iteration cap for yaw %s",
                       yaw_deg)

    out = np.full((N_LANDMARKS, 2), np.nan)
    out[list(sparse.sparse_index)] = pts[list(sparse.sparse_index)]
    for li in reg.target_index:
        out[li] = dense[tpos[li]] * scale + center
    return LandmarkSet(out, sparse_index=tuple(sparse.sparse_index),
                       low_error_index=reg.low_error_index)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _svr_payload(m: SvrModel) -> dict:
    return {"support_vectors": fileio.encode_array(m.support_vectors),
            "coefficients": fileio.encode_array(m.coefficients),
            "bias": m.bias, "gain": m.gain, "offset": m.offset,
            "input_dim": m.input_dim, "output_landmark": m.output_landmark,
            "output_coord": m.output_coord}


def _svr_from_payload(d: dict) -> SvrModel:
    return SvrModel(fileio.decode_array(d["support_vectors"]),
                    fileio.decode_array(d["coefficients"]),
                    float(d["bias"]), float(d["gain"]), float(d["offset"]),
                    int(d["input_dim"]), int(d["output_landmark"]),
                    int(d["output_coord"]))


def brm_model_to_payload(model: BrmModel) -> dict:
    return {
        "sparse_index": list(model.sparse_index),
        "low_error_fraction": model.low_error_fraction,
        "max_iterations": model.max_iterations,
        "convergence_tol": model.convergence_tol,
        "buckets": {
            str(b): {
                "input_index": list(r.input_index),
                "target_index": list(r.target_index),
                "low_error_index": list(r.low_error_index),
                "residuals": [None if np.isnan(v) else v
                              for v in r.residuals],
                "stage1": [_svr_payload(m) for m in r.stage1],
                "stage2": [_svr_payload(m) for m in r.stage2],
            } for b, r in model.buckets.items()
        },
    }


def brm_model_from_payload(payload: dict) -> BrmModel:
    try:
        buckets = {}
        for b, r in payload["buckets"].items():
            residuals = np.array([np.nan if v is None else float(v)
                                  for v in r["residuals"]])
            buckets[int(b)] = BucketRegressor(
                tuple(r["input_index"]), tuple(r["target_index"]),
                tuple(r["low_error_index"]),
                tuple(_svr_from_payload(m) for m in r["stage1"]),
                tuple(_svr_from_payload(m) for m in r["stage2"]),
                residuals)
        return BrmModel(buckets, tuple(payload["sparse_index"]),
                        float(payload["low_error_fraction"]),
                        int(payload["max_iterations"]),
                        float(payload["convergence_tol"]))
    except (KeyError, TypeError, ValueError) as e:
        raise fileio.FormatError(f"bad regressor payload: {e}") from e


def save_brm_model(path, model: BrmModel) -> None:
    fileio.write_model_json(path, "dense_regressor",
                            brm_model_to_payload(model))


def load_brm_model(path) -> BrmModel:
    return brm_model_from_payload(
        fileio.read_model_json(path, "dense_regressor"))
