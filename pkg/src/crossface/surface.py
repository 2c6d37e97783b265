"""Depth-scan smoothing by per-triangle moving-least-squares fits.

The face is decomposed into triangular point-cloud patches via a Delaunay
triangulation of the dense landmarks plus bounding-box padding points.  Each
patch gets a local plane (origin q, unit normal n) and a degree-2 bivariate
polynomial of heights over that plane; plane and polynomial alternate until
the Gaussian-weighted squared distance between polynomial heights and point
heights stops decreasing.  Smoothed depth re-evaluates every pixel on its
patch polynomial, blending across patch edges.

Polynomial coefficient order: (1, x, y, x^2, x*y, y^2) in the plane frame.
The plane frame is canonical given n: e1 is the unit projection of the
coordinate axis least aligned with n, e2 = n x e1; stored fits always use
the canonical frame with n_z >= 0 (first nonzero component positive when
n_z = 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .core import CrossfaceError, LandmarkSet

MIN_FIT_POINTS = 6
BANDWIDTH_SCALE = 0.6
BLEND_BAND_PX = 2.0
MAX_FIT_ITER = 30
REL_TOL = 1e-10


class SurfaceError(CrossfaceError):
    pass


class TriangulationError(SurfaceError):
    pass


class InsufficientPointsError(SurfaceError):
    pass


class PatchRankError(SurfaceError):
    pass


class PatchFitError(SurfaceError):
    pass


@dataclass(frozen=True)
class DepthGrid:
    """Row-major depth in millimeters, NaN marking holes; larger z is
    farther from the camera, 1 px = 1 mm."""

    z: np.ndarray
    landmarks: LandmarkSet = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim != 2 or z.size == 0:
            raise ValueError(f"depth must be nonempty 2-D, got {z.shape}")
        holes = np.isnan(z)
        if np.any(np.isinf(z)):
            raise ValueError("depth contains infinities")
        if holes.mean() >= 0.5:
            raise ValueError("more than half of the depth grid is holes")
        object.__setattr__(self, "z", z)

    @property
    def height(self):
        return self.z.shape[0]

    @property
    def width(self):
        return self.z.shape[1]

    def holes(self) -> np.ndarray:
        return np.isnan(self.z)


@dataclass(frozen=True)
class PointCloudPatch:
    points: np.ndarray  # (N, 3)
    triangle_id: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must be (N, 3)")
        if pts.shape[0] < MIN_FIT_POINTS:
            raise InsufficientPointsError(
                f"triangle {self.triangle_id}: {pts.shape[0]} points < {MIN_FIT_POINTS}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("patch points must be finite")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class LocalFit:
    origin: np.ndarray    # q, (3,)
    normal: np.ndarray    # n, unit (3,)
    coeffs: np.ndarray    # (6,) polynomial parameters
    bandwidth: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("normal must be unit length")
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.shape != (6,) or not np.all(np.isfinite(c)):
            raise ValueError("coeffs must be 6 finite values")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "coeffs", c)


@dataclass(frozen=True)
class NormalMap:
    n: np.ndarray  # (H, W, 3) unit normals, camera-facing (n_z < 0)

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.float64)
        if n.ndim != 3 or n.shape[2] != 3:
            raise ValueError("normal map must be (H, W, 3)")
        norms = np.linalg.norm(n, axis=2)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("normals must be unit length")
        if not np.all(n[:, :, 2] < 0):
            raise ValueError("normals must face the camera (n_z < 0)")
        object.__setattr__(self, "n", n)


# ------------------------------------------------------------ triangulation

@dataclass(frozen=True)
class Triangulation:
    points: np.ndarray     # (M, 2)
    triangles: np.ndarray  # (T, 3) vertex indices
    neighbors: np.ndarray  # (T, 3) adjacent triangle ids, -1 at hull
    _delaunay: Delaunay = None

    def locate(self, xy) -> np.ndarray:
        return self._delaunay.find_simplex(np.asarray(xy, dtype=np.float64))


def triangulate_points(points2d) -> Triangulation:
    pts = np.asarray(points2d, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 planar points")
    try:
        d = Delaunay(pts)
    except QhullError as e:
        raise TriangulationError(f"degenerate point set: {e}") from e
    if d.simplices.size == 0:
        raise TriangulationError("degenerate point set: no triangles")
    return Triangulation(pts, d.simplices.astype(np.int64),
                         d.neighbors.astype(np.int64), d)


def _padding_points(x0, y0, x1, y1) -> np.ndarray:
    # corners exactly on the box; edge midpoints pushed 5% outward so the
    # hull is a proper octagon containing the box
    mx, my = 0.05 * (x1 - x0), 0.05 * (y1 - y0)
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    return np.array([
        [x0, y0], [x1, y0], [x0, y1], [x1, y1],
        [cx, y0 - my], [cx, y1 + my], [x0 - mx, cy], [x1 + mx, cy],
    ])


def triangulate(landmarks: LandmarkSet, bbox=None) -> Triangulation:
    """Delaunay mesh over the 68 landmarks plus 8 bounding-box padding
    points; bbox defaults to the landmark extent expanded by 25%."""
    pts = landmarks.points
    if not np.all(np.isfinite(pts)):
        raise ValueError("dense landmarks must all be populated")
    if bbox is None:
        x0, y0 = pts.min(axis=0)
        x1, y1 = pts.max(axis=0)
        mx, my = 0.25 * (x1 - x0), 0.25 * (y1 - y0)
        bbox = (x0 - mx, y0 - my, x1 + mx, y1 + my)
    pad = _padding_points(*bbox)
    return triangulate_points(np.vstack([pts, pad]))


# ------------------------------------------------------------- local fits

def _canonical_frame(n):
    k = int(np.argmin(np.abs(n)))
    a = np.zeros(3)
    a[k] = 1.0
    e1 = a - a.dot(n) * n
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


def _design(x, y):
    return np.column_stack([np.ones_like(x), x, y, x * x, x * y, y * y])


def _weights(pts, q, bandwidth):
    d2 = ((pts - q) ** 2).sum(axis=1)
    return np.exp(-d2 / (2.0 * bandwidth ** 2))


def _poly_fit(pts, q, n, e1, e2, bandwidth):
    d = pts - q
    x, y, mu = d @ e1, d @ e2, d @ n
    w = _weights(pts, q, bandwidth)
    sw = np.sqrt(w)
    B = _design(x, y)
    lam, _, rank, _ = np.linalg.lstsq(B * sw[:, None], mu * sw, rcond=None)
    if rank < 6:
        raise PatchRankError("weighted polynomial system is rank-deficient")
    resid = (B @ lam - mu)
    return lam, float((w * resid ** 2).sum())


def _objective(pts, q, n, e1, e2, lam, bandwidth):
    d = pts - q
    x, y, mu = d @ e1, d @ e2, d @ n
    w = _weights(pts, q, bandwidth)
    return float((w * (_design(x, y) @ lam - mu) ** 2).sum())


def _perturbed_plane(q, n, e1, theta):
    # 2 tangent components tilt n; the origin moves along the new normal
    # only, staying anchored over the patch centroid
    n2 = n + theta[0] * e1 + theta[1] * np.cross(n, e1)
    n2 = n2 / np.linalg.norm(n2)
    e1b = e1 - e1.dot(n2) * n2
    e1b = e1b / np.linalg.norm(e1b)
    return q + theta[2] * n2, n2, e1b, np.cross(n2, e1b)


def _min_principal_component(pts):
    c = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    return vt[-1]


def fit_patch(patch: PointCloudPatch, bandwidth: float, history: list = None) -> LocalFit:
    """Alternating plane / degree-2 polynomial fit minimizing the
    Gaussian-weighted squared height mismatch over the patch.

    The plane initializes at the patch centroid with the minimum principal
    component as normal; a viewing-direction normal is also tried and the
    initialization with the smaller starting objective wins.  Each iteration
    takes one damped Gauss-Newton plane step (kept only if the objective
    does not increase) followed by an exact re-fit of the polynomial.  When
    a list is passed as history, the weighted-sum value after every
    iteration is appended to it.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    pts = patch.points
    q0 = pts.mean(axis=0)

    cands = []
    for n0 in (_min_principal_component(pts), np.array([0.0, 0.0, -1.0])):
        n0 = n0 / np.linalg.norm(n0)
        e1, e2 = _canonical_frame(n0)
        try:
            lam, err = _poly_fit(pts, q0, n0, e1, e2, bandwidth)
        except PatchRankError:
            continue
        cands.append((err, n0, e1, e2, lam))
    if not cands:
        raise PatchRankError(
            f"triangle {patch.triangle_id}: no full-rank initialization")
    err, n, e1, e2, lam = min(cands, key=lambda t: t[0])
    q = q0.copy()
    if history is not None:
        history.append(err)

    scale = max(bandwidth, 1e-6)
    for _ in range(MAX_FIT_ITER):
        prev = err
        # Gauss-Newton step on (n, q) with the polynomial frozen
        d = pts - q
        x, y, mu = d @ e1, d @ e2, d @ n
        sw = np.sqrt(_weights(pts, q, bandwidth))
        r0 = sw * (_design(x, y) @ lam - mu)
        J = np.empty((pts.shape[0], 3))
        eps = 1e-6 * scale
        for k in range(3):
            th = np.zeros(3)
            th[k] = eps
            q2, n2, e1b, e2b = _perturbed_plane(q, n, e1, th)
            d2 = pts - q2
            sw2 = np.sqrt(_weights(pts, q2, bandwidth))
            r2 = sw2 * (_design(d2 @ e1b, d2 @ e2b) @ lam - d2 @ n2)
            J[:, k] = (r2 - r0) / eps
        g = J.T @ r0
        hess = J.T @ J + 1e-8 * np.trace(J.T @ J) / 3.0 * np.eye(3)
        try:
            step = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            step = np.zeros(3)
        t = 1.0
        for _ in range(10):
            q2, n2, e1b, e2b = _perturbed_plane(q, n, e1, t * step)
            # only strict improvement moves the plane, so flat objective
            # valleys cannot drift the parameterization
            if _objective(pts, q2, n2, e1b, e2b, lam, bandwidth) < prev - 1e-12 * (1 + abs(prev)):
                q, n, e1, e2 = q2, n2, e1b, e2b
                break
            t *= 0.5

        lam, err = _poly_fit(pts, q, n, e1, e2, bandwidth)
        if history is not None:
            history.append(err)
        if err > prev * (1 + 1e-9) + 1e-12:
            raise PatchFitError(
                f"triangle {patch.triangle_id}: objective increased {prev} -> {err}")
        if prev - err <= REL_TOL * max(prev, 1e-30):
            break

    # canonical orientation and frame for storage
    flip = n[2] < 0 or (n[2] == 0 and n[np.nonzero(n)[0][0]] < 0)
    if flip:
        n = -n
    e1, e2 = _canonical_frame(n)
    lam, final = _poly_fit(pts, q, n, e1, e2, bandwidth)
    if final > err * (1 + 1e-9) + 1e-12:
        raise PatchFitError(
            f"triangle {patch.triangle_id}: canonicalization changed objective")
    return LocalFit(q, n, lam, float(bandwidth))


def patch_weighted_sum(fit: LocalFit, points) -> float:
    """Objective value of a fit on a point set (for tests and asserts)."""
    e1, e2 = _canonical_frame(fit.normal)
    return _objective(np.asarray(points, dtype=np.float64), fit.origin,
                      fit.normal, e1, e2, fit.coeffs, fit.bandwidth)


def evaluate_fit_depth(fit: LocalFit, px, py, z_init) -> np.ndarray:
    """Depth of the patch surface along each pixel's viewing ray.

    On the ray (px, py, z) the surface condition mu = u(x', y') is exactly
    quadratic in z, so the intersection is closed-form.  When two roots
    exist the one nearer z_init wins; when none does (the surface folds away
    from the ray) the z of nearest approach is used.
    """
    n, q = fit.normal, fit.origin
    e1, e2 = _canonical_frame(n)
    px = np.asarray(px, dtype=np.float64).ravel()
    py = np.asarray(py, dtype=np.float64).ravel()
    z0 = np.asarray(z_init, dtype=np.float64).ravel()
    c = fit.coeffs
    d0 = np.column_stack([px - q[0], py - q[1], np.full_like(px, -q[2])])
    A, B = d0 @ e1, e1[2]
    C, D = d0 @ e2, e2[2]
    E, F = d0 @ n, n[2]
    gam = np.full_like(px, -(c[3] * B * B + c[4] * B * D + c[5] * D * D))
    bet = F - (c[1] * B + c[2] * D + 2.0 * c[3] * A * B
               + c[4] * (A * D + B * C) + 2.0 * c[5] * C * D)
    bet = np.broadcast_to(bet, px.shape).astype(np.float64)
    alp = E - (c[0] + c[1] * A + c[2] * C + c[3] * A * A
               + c[4] * A * C + c[5] * C * C)
    out = np.empty_like(px)
    lin = np.abs(gam) < 1e-14
    if np.any(lin & (np.abs(bet) < 1e-14)):
        raise PatchFitError("patch surface parallel to the viewing ray")
    np.divide(-alp, bet, out=out, where=lin)
    qd = ~lin
    if np.any(qd):
        g, b, a = gam[qd], bet[qd], alp[qd]
        disc = b ** 2 - 4.0 * g * a
        sq = np.sqrt(np.maximum(disc, 0.0))
        r1 = (-b + sq) / (2.0 * g)
        r2 = (-b - sq) / (2.0 * g)
        ref = z0[qd]
        ref = np.where(np.isfinite(ref), ref, q[2])
        pick = np.where(np.abs(r1 - ref) <= np.abs(r2 - ref), r1, r2)
        out[qd] = np.where(disc >= 0.0, pick, -b / (2.0 * g))
    return out


# ------------------------------------------------------------ smoothing

def _circumradius(p):
    a = np.linalg.norm(p[1] - p[0])
    b = np.linalg.norm(p[2] - p[1])
    c = np.linalg.norm(p[0] - p[2])
    area2 = abs((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1]))
    if area2 < 1e-12:
        return max(a, b, c)
    return a * b * c / (2.0 * area2)


def _seg_dist(px, py, a, b):
    ab = b - a
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / max(ab.dot(ab), 1e-30)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def smooth_depth(raw: DepthGrid) -> DepthGrid:
    """Replace every depth value (holes included) by its patch polynomial
    evaluation, averaging evaluations within 2 px of shared patch edges."""
    if raw.landmarks is None:
        raise ValueError("depth grid must carry registered landmarks")
    h, w = raw.z.shape
    mesh = triangulate(raw.landmarks, bbox=(-1.0, -1.0, float(w), float(h)))
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx.ravel().astype(np.float64), yy.ravel().astype(np.float64)
    simp = mesh.locate(np.column_stack([px, py]))
    if simp.min() < 0:
        raise SurfaceError("pixel outside triangulation coverage")

    ntri = mesh.triangles.shape[0]
    tri_pts = mesh.points[mesh.triangles]
    areas = 0.5 * np.abs(
        (tri_pts[:, 1, 0] - tri_pts[:, 0, 0]) * (tri_pts[:, 2, 1] - tri_pts[:, 0, 1])
        - (tri_pts[:, 2, 0] - tri_pts[:, 0, 0]) * (tri_pts[:, 1, 1] - tri_pts[:, 0, 1]))
    valid = ~np.isnan(raw.z).ravel()

    # union-find merging of triangles whose patches are too small or whose
    # pixel footprint cannot support a full-rank degree-2 fit (slivers)
    parent = np.arange(ntri)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def group_counts():
        roots = np.array([find(t) for t in simp])
        cnt = np.bincount(roots[valid], minlength=ntri)
        return roots, cnt

    def deficient(g, roots, cnt):
        if cnt[g] < MIN_FIT_POINTS:
            return True
        sel = (roots == g) & valid
        x, y = px[sel], py[sel]
        xs = (x - x.mean()) / max(x.std(), 1e-9)
        ys = (y - y.mean()) / max(y.std(), 1e-9)
        return np.linalg.matrix_rank(_design(xs, ys), tol=1e-6) < 6

    for _ in range(ntri):
        roots, cnt = group_counts()
        garea = np.bincount([find(t) for t in range(ntri)], weights=areas,
                            minlength=ntri)
        small = [g for g in np.unique([find(t) for t in range(ntri)])
                 if deficient(g, roots, cnt)]
        if not small:
            break
        g = small[0]
        members = [t for t in range(ntri) if find(t) == g]
        adj = {find(nb) for t in members for nb in mesh.neighbors[t]
               if nb >= 0 and find(nb) != g}
        if not adj:
            raise PatchFitError(f"triangle {members[0]}: no neighbor to merge with")
        target = max(adj, key=lambda a: (garea[a], -a))
        parent[g] = target
    else:
        raise PatchFitError("triangle merging did not terminate")

    roots, _ = group_counts()
    fits = {}
    for g in np.unique(roots):
        sel = (roots == g) & valid
        pts3 = np.column_stack([px[sel], py[sel], raw.z.ravel()[sel]])
        members = [t for t in range(ntri) if find(t) == g]
        bw = BANDWIDTH_SCALE * max(_circumradius(tri_pts[t]) for t in members)
        try:
            fits[g] = fit_patch(PointCloudPatch(pts3, int(members[0])), bw)
        except SurfaceError as e:
            raise PatchFitError(f"triangle {members[0]}: {e}") from e

    zr = raw.z.ravel()
    acc = np.zeros(h * w)
    cnt = np.zeros(h * w)
    for g, fit in fits.items():
        sel = roots == g
        acc[sel] += evaluate_fit_depth(fit, px[sel], py[sel], zr[sel])
        cnt[sel] += 1.0
    # blend across edges separating different patch groups
    edge_seen = set()
    for t in range(ntri):
        for k in range(3):
            nb = mesh.neighbors[t][k]
            if nb < 0 or find(nb) == find(t):
                continue
            v = [mesh.triangles[t][(k + 1) % 3], mesh.triangles[t][(k + 2) % 3]]
            key = (min(t, nb), max(t, nb), min(v), max(v))
            if key in edge_seen:
                continue
            edge_seen.add(key)
            a, b = mesh.points[v[0]], mesh.points[v[1]]
            for here, there in ((t, nb), (nb, t)):
                sel = (roots == find(here)) & (
                    _seg_dist(px, py, a, b) <= BLEND_BAND_PX)
                if sel.any():
                    acc[sel] += evaluate_fit_depth(
                        fits[find(there)], px[sel], py[sel], zr[sel])
                    cnt[sel] += 1.0
    out = (acc / cnt).reshape(h, w)
    if not np.all(np.isfinite(out)):
        raise SurfaceError("smoothing produced non-finite depth")
    return DepthGrid(out, raw.landmarks)


# --------------------------------------------------------------- normals

def depth_gradients(z) -> tuple:
    """(dz/dx, dz/dy) via central differences, one-sided at borders."""
    gy, gx = np.gradient(np.asarray(z, dtype=np.float64))
    return gx, gy


def normals_from_depth(depth) -> NormalMap:
    """Per-pixel unit normals (p, q, -1)/sqrt(p^2 + q^2 + 1)."""
    z = depth.z if isinstance(depth, DepthGrid) else np.asarray(depth, dtype=np.float64)
    if np.any(np.isnan(z)):
        raise ValueError("depth grid still contains holes")
    p, q = depth_gradients(z)
    denom = np.sqrt(p ** 2 + q ** 2 + 1.0)
    n = np.dstack([p / denom, q / denom, -1.0 / denom])
    return NormalMap(n)
