"""Sparse-representation identification over rendered component features.

A gallery dictionary holds one unit-norm feature column per rendered subject
component. A query feature q is decomposed as q ~ A r with r sparse, either
by tracing the full homotopy path of

    min 0.5 ||q - A r||^2 + lambda ||r||_1

from lambda = ||A' q||_inf (where r = 0) down to a target, or by a truncated
Newton interior-point scheme on the same objective with a log-barrier over
the |r_i| <= u_i epigraph and conjugate-gradient Newton steps. Subjects are
ranked by class-wise reconstruction residual ||q - A d_c(r)||_2, where d_c
keeps only class c's coefficients, and the six face components vote:
plurality of rank-1 picks first, rank-2 appearances among tied candidates
next, then smallest summed residual, then smallest subject id.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .core import CrossfaceError
from .features import extract_feature
from .recon import illum_normalize, render_pose

__all__ = [
    "SparseError",
    "DegenerateDictionaryError",
    "ConvergenceError",
    "ResidualBoundError",
    "MissingReconstructionError",
    "Dictionary",
    "SparseProblem",
    "SparseSolution",
    "IdentificationResult",
    "DEFAULT_EPSILON_SCALE",
    "homotopy_solve",
    "tnip_solve",
    "src_classify",
    "class_residuals",
    "feasible_epsilon",
    "vote_components",
    "build_dictionary",
]

DEFAULT_EPSILON_SCALE = 0.05
COLUMN_NORM_TOL = 1e-9
MAX_NEWTON_ITER = 400
MAX_CG_ITER = 200
LINESEARCH_ALPHA = 0.01
LINESEARCH_BETA = 0.5
BARRIER_MU = 2.0


class SparseError(CrossfaceError):
    """Errors raised by the sparse-classification stage."""


class DegenerateDictionaryError(SparseError):
    """Active-set system singular (linearly dependent gallery columns)."""


class ConvergenceError(SparseError):
    """Interior-point iterations exhausted before the duality gap closed."""

    def __init__(self, message: str, gap: float):
        super().__init__(message)
        self.gap = float(gap)


class ResidualBoundError(SparseError):
    """No penalty level reaches the requested residual bound."""


class MissingReconstructionError(SparseError):
    """A gallery subject lacks the reconstruction needed for its render."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dictionary:
    """Unit-norm gallery feature columns with per-column subject labels."""

    matrix: np.ndarray
    labels: tuple
    feature_kind: str = "intensity"
    pose_deg: float = 0.0
    norms: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.size == 0:
            raise ValueError("dictionary matrix must be nonempty 2-D")
        if not np.all(np.isfinite(m)):
            raise ValueError("dictionary matrix must be finite")
        labels = tuple(int(v) for v in self.labels)
        if len(labels) != m.shape[1]:
            raise ValueError("one label per dictionary column required")
        lengths = np.linalg.norm(m, axis=0)
        if np.abs(lengths - 1.0).max() > COLUMN_NORM_TOL:
            raise ValueError("dictionary columns must be unit-normalized")
        norms = tuple(float(v) for v in self.norms) if len(self.norms) else \
            tuple(1.0 for _ in labels)
        if len(norms) != len(labels):
            raise ValueError("one stored norm per column required")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "norms", norms)

    @property
    def subjects(self) -> tuple:
        return tuple(sorted(set(self.labels)))


@dataclass(frozen=True)
class SparseProblem:
    """A query feature with its residual bound and penalty level."""

    q: np.ndarray
    epsilon: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).ravel()
        if not np.all(np.isfinite(q)):
            raise ValueError("query feature must be finite")
        if self.epsilon < 0.0 or self.lam < 0.0:
            raise ValueError("epsilon and lambda must be non-negative")
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class SparseSolution:
    """Sparse coefficients with the residual norm and solver bookkeeping."""

    r: np.ndarray
    residual: float
    solver: str
    iterations: int
    lambda_final: float

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64).ravel()
        if not np.all(np.isfinite(r)) or not math.isfinite(self.residual):
            raise ValueError("solution must be finite")
        if self.solver not in ("homotopy", "tnip"):
            raise ValueError(f"unknown solver tag {self.solver!r}")
        object.__setattr__(self, "r", r)


@dataclass(frozen=True)
class IdentificationResult:
    """Per-component subject rankings, the vote breakdown, and the winner."""

    per_component: Mapping[str, tuple]
    final_id: int
    breakdown: Mapping[int, int]
    per_component_extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ranked = {}
        for cid, rows in dict(self.per_component).items():
            rows = tuple((int(s), float(d)) for s, d in rows)
            res = [d for _, d in rows]
            if any(b < a for a, b in zip(res, res[1:])):
                raise ValueError(f"component {cid} ranking not ascending")
            ranked[str(cid)] = rows
        breakdown = {int(k): int(v) for k, v in dict(self.breakdown).items()}
        if int(self.final_id) not in breakdown:
            raise ValueError("final id must appear in the vote breakdown")
        object.__setattr__(self, "per_component", ranked)
        object.__setattr__(self, "final_id", int(self.final_id))
        object.__setattr__(self, "breakdown", breakdown)


def _as_matrix(A) -> np.ndarray:
    if isinstance(A, Dictionary):
        return A.matrix
    m = np.asarray(A, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("dictionary must be a 2-D matrix")
    return m


# ---------------------------------------------------------------------------
# Homotopy path solver
# ---------------------------------------------------------------------------

def _homotopy_path(A, q, lambda_target, tol, stop_residual=None):
    """Trace the piecewise-linear coefficient path from lambda_max down.

    Returns (r, lambda_final, breakpoints). With ``stop_residual`` the walk
    stops inside the first segment where the residual norm reaches it.
    """
    m = _as_matrix(A)
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.size != m.shape[0]:
        raise ValueError("query dimension does not match dictionary rows")
    n = m.shape[1]
    gram = m.T @ m
    r = np.zeros(n)
    c = m.T @ q
    lam = float(np.abs(c).max()) if n else 0.0
    if stop_residual is not None and np.linalg.norm(q) <= stop_residual:
        return r, lam, 0
    if lam <= lambda_target:
        return r, lambda_target, 0

    active = [int(np.abs(c).argmax())]
    signs = {active[0]: float(np.sign(c[active[0]]))}
    steps = 0
    for steps in range(1, 8 * n + 2):
        idx = np.array(active)
        s_vec = np.array([signs[j] for j in active])
        sub = gram[np.ix_(idx, idx)]
        try:
            d_act = np.linalg.solve(sub, s_vec)
        except np.linalg.LinAlgError as e:
            raise DegenerateDictionaryError(
                f"active columns {sorted(active)} are linearly dependent") from e
        if not np.all(np.isfinite(d_act)):
            raise DegenerateDictionaryError(
                f"active columns {sorted(active)} are linearly dependent")

        # correlations shrink as c_j - gamma * b_j while lambda drops by gamma
        b = gram[:, idx] @ d_act
        gamma_max = lam - lambda_target
        gamma = gamma_max
        event = None
        for j in range(n):
            if j in signs:
                continue
            for target_sign, denom in ((1.0, 1.0 - b[j]), (-1.0, 1.0 + b[j])):
                num = lam - target_sign * c[j]
                if denom > 1e-14:
                    g = num / denom
                    if tol < g < gamma:
                        gamma, event = g, ("enter", j, target_sign)
        for pos, j in enumerate(active):
            if d_act[pos] != 0.0:
                g = -r[j] / d_act[pos]
                if tol < g < gamma:
                    gamma, event = g, ("leave", j, 0.0)

        if stop_residual is not None:
            # residual shrinks along the segment; cut it where the norm
            # crosses the requested bound
            res = q - m @ r
            v = m[:, idx] @ d_act
            vv = float(v @ v)
            rv = float(res @ v)
            rr = float(res @ res)
            if vv > 1e-300:
                disc = rv * rv - vv * (rr - stop_residual ** 2)
                if disc >= 0.0:
                    g_cut = (rv - math.sqrt(disc)) / vv
                    if 0.0 <= g_cut <= gamma:
                        r[idx] += g_cut * d_act
                        return r, lam - g_cut, steps

        r[idx] += gamma * d_act
        lam -= gamma
        c -= gamma * b
        if event is None:
            return r, lam, steps
        kind, j, sign = event
        if kind == "enter":
            active.append(j)
            signs[j] = sign
        else:
            active.remove(j)
            del signs[j]
            r[j] = 0.0
        if not active:
            return r, lam, steps
    raise SparseError("homotopy path failed to terminate")


def homotopy_solve(A, q, lambda_target: float,
                   tol: float = 1e-10) -> SparseSolution:
    """Path-following solve of the penalized objective down to a target.

    Starts at lambda = ||A'q||_inf where the solution is exactly zero and
    walks the piecewise-linear path, adding or dropping one active column
    per breakpoint; the result satisfies the subgradient conditions at
    ``lambda_target`` within ``tol``.
    """
    if lambda_target < 0.0:
        raise ValueError("lambda_target must be non-negative")
    m = _as_matrix(A)
    q = np.asarray(q, dtype=np.float64).ravel()
    r, lam, steps = _homotopy_path(m, q, lambda_target, tol)
    residual = float(np.linalg.norm(q - m @ r))
    return SparseSolution(r, residual, "homotopy", steps, lam)


# ---------------------------------------------------------------------------
# Truncated Newton interior-point solver
# ---------------------------------------------------------------------------

def _pcg(S, rhs, tol, max_iter):
    """Diagonally preconditioned conjugate gradients, truncated."""
    x = np.zeros_like(rhs)
    r = rhs.copy()
    d = np.diag(S).copy()
    d[d <= 0.0] = 1.0
    z = r / d
    p = z.copy()
    rz = float(r @ z)
    limit = tol * float(np.linalg.norm(rhs))
    for _ in range(max_iter):
        if np.linalg.norm(r) <= limit:
            break
        Sp = S @ p
        denom = float(p @ Sp)
        if denom <= 0.0:
            break
        a = rz / denom
        x += a * p
        r -= a * Sp
        z = r / d
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def _dual_gap(m, q, x, lam):
    z = m @ x - q
    primal = 0.5 * float(z @ z) + lam * float(np.abs(x).sum())
    corr = m.T @ z
    top = float(np.abs(corr).max()) if corr.size else 0.0
    scale = min(lam / top, 1.0) if top > 0.0 else 1.0
    nu = scale * z
    dual = -0.5 * float(nu @ nu) - float(nu @ q)
    return primal - dual, primal


def tnip_solve(A, q, lam: float, tol: float = 1e-10) -> SparseSolution:
    """Interior-point solve of the penalized objective at one lambda.

    The l1 term is lifted to bound variables u >= |r| with a log barrier;
    each Newton step eliminates u and solves the remaining system by
    truncated conjugate gradients, then backtracks on the barrier
    objective. Iterations stop when the duality gap falls under ``tol``.
    """
    if not lam > 0.0:
        raise ValueError("lambda must be positive")
    m = _as_matrix(A)
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.size != m.shape[0]:
        raise ValueError("query dimension does not match dictionary rows")
    n = m.shape[1]
    gram = m.T @ m
    x = np.zeros(n)
    u = np.ones(n)
    t = max(1.0, 1.0 / lam)

    gap, primal = _dual_gap(m, q, x, lam)
    if gap < tol:
        return SparseSolution(x, float(np.linalg.norm(q - m @ x)), "tnip",
                              0, lam)
    for it in range(1, MAX_NEWTON_ITER + 1):
        f1 = 1.0 / (u + x)
        f2 = 1.0 / (u - x)
        z = m @ x - q
        g_x = t * (m.T @ z) - f1 + f2
        g_u = t * lam - f1 - f2
        d1 = f1 ** 2 + f2 ** 2
        d2 = f1 ** 2 - f2 ** 2

        # 4 f1^2 f2^2 / d1 equals d1 - d2^2/d1 without the cancellation
        # that wrecks the subtraction once the barrier weight is large
        S = t * gram + np.diag(4.0 * (f1 * f2) ** 2 / d1)
        rhs = -g_x + (d2 / d1) * g_u
        cg_tol = max(min(0.1, 0.1 * gap), 1e-14)
        dx = _pcg(S, rhs, cg_tol, MAX_CG_ITER)
        du = -(g_u + d2 * dx) / d1

        # backtrack inside the feasible cone, then on sufficient decrease
        phi = float(t * (0.5 * z @ z + lam * u.sum())
                    - np.log(u + x).sum() - np.log(u - x).sum())
        slope = float(g_x @ dx + g_u @ du)
        step = 1.0
        for _ in range(60):
            x_try = x + step * dx
            u_try = u + step * du
            if np.all(u_try + x_try > 0.0) and np.all(u_try - x_try > 0.0):
                z_try = m @ x_try - q
                phi_try = float(t * (0.5 * z_try @ z_try + lam * u_try.sum())
                                - np.log(u_try + x_try).sum()
                                - np.log(u_try - x_try).sum())
                if phi_try <= phi + LINESEARCH_ALPHA * step * slope:
                    break
            step *= LINESEARCH_BETA
        else:
            step = 0.0
        x = x + step * dx
        u = u + step * du

        gap, primal = _dual_gap(m, q, x, lam)
        if gap < tol:
            return SparseSolution(x, float(np.linalg.norm(q - m @ x)),
                                  "tnip", it, lam)
        if step >= 0.5:
            t = max(BARRIER_MU * min(2.0 * n / gap, t), t)
    raise ConvergenceError(
        f"duality gap {gap:.3e} after {MAX_NEWTON_ITER} Newton steps "
        f"(tolerance {tol:.1e})", gap)


# ---------------------------------------------------------------------------
# Classification and voting
# ---------------------------------------------------------------------------

def class_residuals(A: Dictionary, q, r) -> list:
    """Subjects ranked by reconstruction with only their own coefficients."""
    q = np.asarray(q, dtype=np.float64).ravel()
    r = np.asarray(r, dtype=np.float64).ravel()
    labels = np.array(A.labels)
    rows = []
    for subject in A.subjects:
        keep = np.where(labels == subject, r, 0.0)
        rows.append((subject, float(np.linalg.norm(q - A.matrix @ keep))))
    rows.sort(key=lambda sr: (sr[1], sr[0]))
    return rows


def feasible_epsilon(A, q, scale: float = DEFAULT_EPSILON_SCALE,
                     slack: float = 1.05) -> float:
    """Residual bound for a query: a fraction of its norm, floored at the
    best residual the dictionary span can reach (with slack).

    Small galleries cannot approximate an arbitrary query to a few percent,
    so the floor keeps the bound attainable.
    """
    m = _as_matrix(A)
    q = np.asarray(q, dtype=np.float64).ravel()
    coef, *_ = np.linalg.lstsq(m, q, rcond=None)
    floor = float(np.linalg.norm(q - m @ coef))
    return max(scale * float(np.linalg.norm(q)), slack * floor)


def src_classify(A: Dictionary, q, solver: str = "homotopy",
                 epsilon: Optional[float] = None) -> list:
    """Rank gallery subjects for one query feature.

    The sparse code is found at the largest penalty whose residual meets
    the bound (path cut for homotopy, bisection for the interior-point
    solver); ``epsilon`` defaults to 5% of the query norm.
    """
    if not isinstance(A, Dictionary):
        raise TypeError("src_classify needs a Dictionary")
    q = np.asarray(q, dtype=np.float64).ravel()
    qn = float(np.linalg.norm(q))
    if epsilon is None:
        epsilon = DEFAULT_EPSILON_SCALE * qn
    if epsilon < 0.0:
        raise ValueError("epsilon must be non-negative")

    if solver == "homotopy":
        r, lam, _ = _homotopy_path(A.matrix, q, 0.0, 1e-10,
                                   stop_residual=epsilon)
        if float(np.linalg.norm(q - A.matrix @ r)) > epsilon + 1e-9:
            raise ResidualBoundError(
                f"homotopy path bottoms out above the bound {epsilon:.3e}")
    elif solver == "tnip":
        r = _tnip_at_bound(A.matrix, q, epsilon, qn)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return class_residuals(A, q, r)


def _tnip_at_bound(m, q, epsilon, qn):
    """Bisect the penalty until the residual settles just under the bound."""
    if qn <= epsilon:
        return np.zeros(m.shape[1])
    hi = float(np.abs(m.T @ q).max())
    if hi <= 0.0:
        raise ResidualBoundError("query is orthogonal to the dictionary")
    lo = hi * 1e-9
    sol = tnip_solve(m, q, lo, tol=1e-10)
    if sol.residual > epsilon:
        raise ResidualBoundError(
            f"residual {sol.residual:.3e} stays above the bound "
            f"{epsilon:.3e} even at the smallest penalty")
    best = sol.r
    for _ in range(40):
        mid = math.sqrt(lo * hi)
        sol = tnip_solve(m, q, mid, tol=1e-10)
        if sol.residual <= epsilon:
            best, lo = sol.r, mid
        else:
            hi = mid
        if hi / lo < 1.02:
            break
    return best


def vote_components(results: Mapping[str, Sequence],
                    visibility: Optional[Mapping[str, bool]] = None
                    ) -> IdentificationResult:
    """Combine per-component rankings into one identity.

    Visible components each cast their rank-1 subject; plurality wins.
    Tied candidates gain their rank-2 appearances; a remaining tie goes to
    the smallest summed class residual, then the smallest subject id.
    """
    ranked = {str(k): tuple((int(s), float(d)) for s, d in v)
              for k, v in dict(results).items()}
    if visibility is None:
        visible = sorted(ranked)
    else:
        visible = sorted(k for k in ranked if dict(visibility).get(k, False))
    if not visible:
        raise SparseError("voting needs at least one visible component")

    votes = Counter(ranked[k][0][0] for k in visible)
    top = max(votes.values())
    tied = sorted(s for s, nvotes in votes.items() if nvotes == top)
    if len(tied) > 1:
        boosted = Counter({s: votes[s] for s in tied})
        for k in visible:
            if len(ranked[k]) > 1 and ranked[k][1][0] in boosted:
                boosted[ranked[k][1][0]] += 1
        top2 = max(boosted.values())
        tied = sorted(s for s, nvotes in boosted.items() if nvotes == top2)
    if len(tied) > 1:
        def summed(subject):
            total = 0.0
            for k in visible:
                total += sum(d for s, d in ranked[k] if s == subject)
            return total
        tied.sort(key=lambda s: (summed(s), s))
    winner = tied[0]
    return IdentificationResult(ranked, winner, dict(votes))


def build_dictionary(gallery: Mapping[int, object], kind: str,
                     pose_deg: float, lighting=None) -> Dictionary:
    """Render every subject's component at one pose and stack features.

    ``gallery`` maps subject id to a reconstructed state renderable by
    ``render_pose``; each render is photometrically flattened, reduced to
    the requested feature, and l2-normalized into one column.
    """
    if not gallery:
        raise MissingReconstructionError("gallery holds no subjects")
    cols = []
    labels = []
    norms = []
    for subject in sorted(gallery):
        state = gallery[subject]
        if state is None:
            raise MissingReconstructionError(
                f"subject {subject} has no reconstruction to render")
        light = state.lighting if lighting is None else lighting
        shot = render_pose(state, pose_deg, light)
        feat = extract_feature(illum_normalize(shot.image), kind).values
        norm = float(np.linalg.norm(feat))
        if norm <= 1e-12:
            raise MissingReconstructionError(
                f"subject {subject} renders to an empty feature")
        cols.append(feat / norm)
        labels.append(int(subject))
        norms.append(norm)
    return Dictionary(np.column_stack(cols), tuple(labels), kind,
                      float(pose_deg), tuple(norms))
