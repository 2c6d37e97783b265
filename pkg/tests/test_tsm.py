import itertools
import os

import numpy as np
import pytest

from crossface import tsm
from crossface.core import LandmarkSet
from crossface.features import FeatureMap, FeaturePyramid, build_pyramid
from crossface.fileio import FormatError


def make_pyramid(grids, cell=2, step=0.5):
    levels = []
    for k, g in enumerate(grids):
        ch, cw, d = g.shape
        fm = FeatureMap(cells_w=cw, cells_h=ch, dim=d, data=g.ravel(),
                        cell_size=cell)
        levels.append((step ** k, fm))
    return FeaturePyramid(tuple(levels), step)


def cell_loc(model, part_id, cx, cy, scale=1.0):
    p = model.part_by_id(part_id)
    return tsm._cell_to_image(cx, cy, p, scale, model.cell_size, model.pad)


def spring_score(b, dx, dy):
    return b[0] * dx + b[1] * dx * dx + b[2] * dy + b[3] * dy * dy


def random_tree_model(rng, n_parts, dim=2, fsize=1, bias=None):
    # Random tree: part k>0 attaches to a uniformly drawn earlier part.
    parts = []
    springs = []
    for k in range(n_parts):
        parent = None if k == 0 else int(rng.randint(0, k))
        filt = rng.randn(fsize, fsize, dim)
        parts.append(tsm.Part(k, parent, filt))
        if parent is not None:
            b = np.array([rng.uniform(-1, 1), rng.uniform(-2.0, -0.1),
                          rng.uniform(-1, 1), rng.uniform(-2.0, -0.1)])
            springs.append(tsm.Spring(k, parent, b))
    if bias is None:
        bias = float(rng.randn())
    return tsm.TreeModel(tuple(parts), tuple(springs), bias, 100.0, {})


def naive_infer(model, grid):
    """Reference DP without distance transforms: per-edge O(cells^2) max."""
    resp = {}
    for p in model.parts:
        h, w, _ = p.filter.shape
        ch, cw, _ = grid.shape
        r = np.empty((ch - h + 1, cw - w + 1))
        for y in range(r.shape[0]):
            for x in range(r.shape[1]):
                r[y, x] = np.sum(p.filter * grid[y:y + h, x:x + w, :])
        resp[p.id] = r
    args = {}
    for pid in model.dp_order():
        part = model.part_by_id(pid)
        if part.parent is None:
            continue
        b = model.spring_for(pid).b
        g = resp[pid]
        hp, wp = resp[part.parent].shape
        hc, wc = g.shape
        py, px = np.mgrid[0:hp, 0:wp]
        best = np.full((hp, wp), -np.inf)
        arg = np.zeros((hp, wp), dtype=int)
        for cy in range(hc):
            for cx in range(wc):
                s = g[cy, cx] + spring_score(b, px - cx, py - cy)
                better = s > best
                best = np.where(better, s, best)
                arg = np.where(better, cy * wc + cx, arg)
        resp[part.parent] = resp[part.parent] + best
        args[pid] = (arg, wc)
    g0 = resp[model.root.id] + model.bias
    ry, rx = np.unravel_index(np.argmax(g0), g0.shape)
    cells = {model.root.id: (int(ry), int(rx))}
    stack = [model.root.id]
    while stack:
        pid = stack.pop()
        y, x = cells[pid]
        for cid in model.children_of(pid):
            arg, wc = args[cid]
            cells[cid] = divmod(int(arg[y, x]), wc)
            stack.append(cid)
    return float(g0[ry, rx]), cells


def enumerate_best(model, grid):
    """Literal enumeration over every full configuration."""
    resp = {}
    for p in model.parts:
        h, w, _ = p.filter.shape
        ch, cw, _ = grid.shape
        r = np.empty((ch - h + 1, cw - w + 1))
        for y in range(r.shape[0]):
            for x in range(r.shape[1]):
                r[y, x] = np.sum(p.filter * grid[y:y + h, x:x + w, :])
        resp[p.id] = r
    ids = [p.id for p in model.parts]
    ranges = [list(np.ndindex(resp[i].shape)) for i in ids]
    best, best_cells = -np.inf, None
    for combo in itertools.product(*ranges):
        cells = dict(zip(ids, combo))
        s = model.bias + sum(resp[i][cells[i]] for i in ids)
        for sp in model.springs:
            dy = cells[sp.parent][0] - cells[sp.child][0]
            dx = cells[sp.parent][1] - cells[sp.child][1]
            s += spring_score(sp.b, dx, dy)
        if s > best:
            best, best_cells = s, cells
    return float(best), best_cells


# ------------------------------------------------------------- model types

def test_spring_rejects_positive_quadratic():
    with pytest.raises(ValueError):
        tsm.Spring(1, 0, [0.0, 0.5, 0.0, -1.0])
    with pytest.raises(ValueError):
        tsm.Spring(1, 0, [0.0, -1.0, 0.0, 1e-9])
    tsm.Spring(1, 0, [3.0, 0.0, -3.0, 0.0])  # zero curvature allowed


def test_model_validation():
    z = np.zeros((1, 1, 2))
    p0 = tsm.Part(0, None, z)
    p1 = tsm.Part(1, 0, z)
    s = tsm.Spring(1, 0, [0, -1, 0, -1])
    tsm.TreeModel((p0, p1), (s,), 0.0, 100.0, {0: 30})
    with pytest.raises(ValueError):  # two roots
        tsm.TreeModel((p0, tsm.Part(1, None, z)), (), 0.0, 100.0, {})
    with pytest.raises(ValueError):  # no spring for the edge
        tsm.TreeModel((p0, p1), (), 0.0, 100.0, {})
    with pytest.raises(ValueError):  # spring for a non-edge
        tsm.TreeModel((p0, p1), (s, tsm.Spring(0, 1, [0, -1, 0, -1])),
                      0.0, 100.0, {})
    with pytest.raises(ValueError):  # cycle below the root
        tsm.TreeModel((p0, tsm.Part(1, 2, z), tsm.Part(2, 1, z)),
                      (tsm.Spring(1, 2, [0, -1, 0, -1]),
                       tsm.Spring(2, 1, [0, -1, 0, -1])), 0.0, 100.0, {})
    with pytest.raises(ValueError):  # landmark_map not injective
        tsm.TreeModel((p0, p1), (s,), 0.0, 100.0, {0: 30, 1: 30})
    with pytest.raises(ValueError):  # landmark index out of range
        tsm.TreeModel((p0, p1), (s,), 0.0, 100.0, {0: 68})


# ---------------------------------------------------------------- scoring

def test_bias_only_score():
    z = np.zeros((1, 1, 3))
    m = tsm.TreeModel((tsm.Part(0, None, z), tsm.Part(1, 0, z)),
                      (tsm.Spring(1, 0, [0, 0, 0, 0]),), 5.0, 100.0, {})
    pyr = make_pyramid([np.random.RandomState(0).rand(4, 4, 3)])
    locs = {0: cell_loc(m, 0, 1, 2), 1: cell_loc(m, 1, 3, 0)}
    assert tsm.score_configuration(m, pyr, locs, 0) == 5.0


def test_zero_offset_spring_contributes_zero():
    rng = np.random.RandomState(1)
    f0, f1 = rng.randn(1, 1, 2), rng.randn(1, 1, 2)
    sp = tsm.Spring(1, 0, [7.0, -3.0, -2.0, -5.0])
    m = tsm.TreeModel((tsm.Part(0, None, f0), tsm.Part(1, 0, f1)), (sp,),
                      0.0, 100.0, {})
    grid = rng.rand(4, 4, 2)
    pyr = make_pyramid([grid])
    locs = {0: cell_loc(m, 0, 2, 1), 1: cell_loc(m, 1, 2, 1)}
    got = tsm.score_configuration(m, pyr, locs, 0)
    want = float(np.sum(f0 * grid[1, 2]) + np.sum(f1 * grid[1, 2]))
    assert got == pytest.approx(want, abs=1e-12)


def test_hand_computed_two_part_score():
    rng = np.random.RandomState(2)
    grid = rng.rand(4, 4, 3)
    f0 = np.zeros((1, 1, 3))
    f0[0, 0, 0] = 2.0
    f1 = np.zeros((1, 1, 3))
    f1[0, 0, 1] = 3.0
    sp = tsm.Spring(1, 0, [0.5, -1.0, 0.0, -2.0])
    m = tsm.TreeModel((tsm.Part(0, None, f0), tsm.Part(1, 0, f1)), (sp,),
                      0.25, 100.0, {})
    pyr = make_pyramid([grid])
    locs = {0: cell_loc(m, 0, 2, 1), 1: cell_loc(m, 1, 0, 3)}
    # dx = 2, dy = -2: spring = 0.5*2 - 1*4 + 0 - 2*4 = -11
    want = 2.0 * grid[1, 2, 0] + 3.0 * grid[3, 0, 1] - 11.0 + 0.25
    assert tsm.score_configuration(m, pyr, locs, 0) == pytest.approx(
        want, abs=1e-12)


def test_out_of_bounds_location_raises():
    z = np.zeros((2, 2, 1))
    m = tsm.TreeModel((tsm.Part(0, None, z),), (), 0.0, 100.0, {})
    pyr = make_pyramid([np.zeros((4, 4, 1))])
    with pytest.raises(tsm.LocationError):
        tsm.score_configuration(m, pyr, {0: cell_loc(m, 0, 3, 0)}, 0)
    with pytest.raises(tsm.LocationError):
        tsm.score_configuration(m, pyr, {0: cell_loc(m, 0, -1, 0)}, 0)
    tsm.score_configuration(m, pyr, {0: cell_loc(m, 0, 2, 2)}, 0)


def test_cell_size_mismatch_raises():
    z = np.zeros((1, 1, 1))
    m = tsm.TreeModel((tsm.Part(0, None, z),), (), 0.0, 100.0, {},
                      cell_size=4)
    pyr = make_pyramid([np.zeros((4, 4, 1))], cell=2)
    with pytest.raises(tsm.TreeModelError):
        tsm.score_configuration(m, pyr, {0: (0.0, 0.0)}, 0)


# ----------------------------------------------------- distance transform

def test_dt_single_peak_quadratic():
    g = np.zeros((6, 7))
    g[2, 3] = 100.0
    sp = tsm.Spring(1, 0, [0.0, -1.5, 0.0, -0.5])
    msg = tsm.dt_message(g, sp)
    ys, xs = np.mgrid[0:6, 0:7].astype(float)
    want = 100.0 - 1.5 * (xs - 3) ** 2 - 0.5 * (ys - 2) ** 2
    assert np.allclose(msg, want, atol=1e-12)


def test_dt_rejects_flat_spring():
    with pytest.raises(tsm.SpringCurvatureError):
        tsm.dt_message(np.zeros((4, 4)), tsm.Spring(1, 0, [0, 0, 0, -1]))
    with pytest.raises(tsm.SpringCurvatureError):
        tsm.dt_message(np.zeros((4, 4)), tsm.Spring(1, 0, [1, -1, 1, 0]))


def brute_message(g, b, hp, wp):
    hc, wc = g.shape
    out = np.full((hp, wp), -np.inf)
    for py in range(hp):
        for px in range(wp):
            for cy in range(hc):
                for cx in range(wc):
                    s = g[cy, cx] + spring_score(b, px - cx, py - cy)
                    if s > out[py, px]:
                        out[py, px] = s
    return out


def test_dt_matches_brute_force():
    rng = np.random.RandomState(3)
    for _ in range(25):
        hc, wc = rng.randint(3, 13, size=2)
        hp, wp = (hc, wc) if rng.rand() < 0.5 else rng.randint(3, 13, size=2)
        g = rng.randn(hc, wc) * rng.uniform(0.5, 5.0)
        b = np.array([rng.uniform(-2, 2), rng.uniform(-3.0, -0.05),
                      rng.uniform(-2, 2), rng.uniform(-3.0, -0.05)])
        sp = tsm.Spring(1, 0, b)
        msg = tsm.dt_message(g, sp, (hp, wp))
        assert np.max(np.abs(msg - brute_message(g, b, hp, wp))) < 1e-9


def test_dt_tie_breaks_to_smallest_index():
    g = np.zeros((1, 5))
    g[0, 0] = g[0, 2] = 4.0
    sp = tsm.Spring(1, 0, [0.0, -1.0, 0.0, -1.0])
    msg, argy, argx = tsm._dt_message_full(g, sp)
    # Parent column 1 is equidistant from both peaks; column 0 must win.
    assert msg[0, 1] == 3.0
    assert argx[0, 1] == 0 and argy[0, 1] == 0


# -------------------------------------------------------------- inference

def test_dp_three_part_chain_matches_enumeration():
    rng = np.random.RandomState(4)
    grid = rng.rand(4, 4, 3)
    f = [rng.randn(1, 1, 3) for _ in range(3)]
    sps = (tsm.Spring(1, 0, [0.5, -1.0, 0.0, -2.0]),
           tsm.Spring(2, 1, [-0.3, -0.7, 0.2, -0.5]))
    m = tsm.TreeModel((tsm.Part(0, None, f[0]), tsm.Part(1, 0, f[1]),
                       tsm.Part(2, 1, f[2])), sps, 0.1, 100.0, {})
    best = tsm.dp_infer(m, make_pyramid([grid]), -np.inf)[0]
    want, cells = enumerate_best(m, grid)
    assert best.score == pytest.approx(want, abs=1e-9)
    got = {pid: tsm._image_to_cell(best.locations[pid], m.part_by_id(pid),
                                   1.0, m.cell_size, m.pad)
           for pid in (0, 1, 2)}
    assert got == {pid: (c[1], c[0]) for pid, c in cells.items()}


def test_naive_oracle_matches_enumeration():
    # Validates the quadratic-time reference itself on tiny instances.
    rng = np.random.RandomState(5)
    for n_parts in (1, 2, 3):
        for _ in range(3):
            grid = rng.rand(4, 4, 2)
            m = random_tree_model(rng, n_parts)
            s_naive, c_naive = naive_infer(m, grid)
            s_enum, c_enum = enumerate_best(m, grid)
            assert s_naive == pytest.approx(s_enum, abs=1e-9)
            assert c_naive == c_enum


def test_dp_random_models_match_oracle():
    rng = np.random.RandomState(6)
    for _ in range(20):
        n_parts = rng.randint(1, 5)
        ch, cw = rng.randint(4, 9, size=2)
        fsize = rng.randint(1, 3)
        if ch <= fsize or cw <= fsize:
            fsize = 1
        grid = rng.rand(ch, cw, 2)
        m = random_tree_model(rng, n_parts, fsize=fsize)
        best = tsm.dp_infer(m, make_pyramid([grid]), -np.inf)[0]
        want, cells = naive_infer(m, grid)
        assert best.score == pytest.approx(want, abs=1e-9)
        got = {p.id: tsm._image_to_cell(best.locations[p.id], p, 1.0,
                                        m.cell_size, m.pad)
               for p in m.parts}
        assert got == {pid: (c[1], c[0]) for pid, c in cells.items()}
        assert best.score == pytest.approx(
            tsm.score_configuration(m, make_pyramid([grid]),
                                    best.locations, best.level), abs=1e-9)


def test_dp_single_part_thresholded_maxima():
    resp = np.zeros((12, 12, 1))
    resp[2, 2, 0] = 5.0
    resp[9, 8, 0] = 4.0
    resp[5, 5, 0] = 0.5  # below threshold
    filt = np.ones((2, 2, 1)) * 0.0
    filt[0, 0, 0] = 1.0  # reads the top-left cell of its patch
    m = tsm.TreeModel((tsm.Part(0, None, filt),), (), 0.25, 100.0, {})
    dets = tsm.dp_infer(m, make_pyramid([resp]), 1.0)
    assert len(dets) == 2
    assert dets[0].score == pytest.approx(5.25)
    assert dets[1].score == pytest.approx(4.25)
    assert dets[0].locations[0] == cell_loc(m, 0, 2, 2)
    assert dets[1].locations[0] == cell_loc(m, 0, 8, 9)


def test_dp_zero_springs_decouples():
    rng = np.random.RandomState(7)
    grid = rng.rand(5, 6, 2)
    f = [rng.randn(1, 1, 2) for _ in range(3)]
    zero = [0.0, 0.0, 0.0, 0.0]
    m = tsm.TreeModel((tsm.Part(0, None, f[0]), tsm.Part(1, 0, f[1]),
                       tsm.Part(2, 0, f[2])),
                      (tsm.Spring(1, 0, zero), tsm.Spring(2, 0, zero)),
                      0.0, 100.0, {})
    best = tsm.dp_infer(m, make_pyramid([grid]), -np.inf)[0]
    want = sum(float(np.max(np.einsum("hwd,yxd->yx", fk, grid)))
               for fk in f)
    assert best.score == pytest.approx(want, abs=1e-9)


def test_threshold_monotonicity():
    rng = np.random.RandomState(8)
    grid = rng.rand(10, 10, 2)
    m = random_tree_model(rng, 3)
    pyr = make_pyramid([grid])
    prev = None
    for t in (-np.inf, -2.0, 0.0, 1.0, 3.0):
        dets = tsm.dp_infer(m, pyr, t)
        keys = {(d.level, d.box, round(d.score, 9)) for d in dets}
        if prev is not None:
            assert keys <= prev
        prev = keys


# -------------------------------------------------------------------- nms

def test_nms_single_and_identical():
    d1 = tsm.Detection(3.0, {0: (1.0, 1.0)}, 0, (0, 0, 4, 4))
    d2 = tsm.Detection(5.0, {0: (1.0, 1.0)}, 0, (0, 0, 4, 4))
    assert tsm.nms([d1], 0.5) == [d1]
    assert tsm.nms([d1, d2], 0.5) == [d2]
    with pytest.raises(ValueError):
        tsm.nms([d1], 0.0)
    with pytest.raises(ValueError):
        tsm.nms([d1], 1.0)


def reference_nms(dets, overlap):
    order = sorted(dets, key=lambda d: (-d.score, d.level, d.box[1],
                                        d.box[0]))
    keep = []
    for d in order:
        ok = True
        for k in keep:
            ax0, ay0, ax1, ay1 = d.box
            bx0, by0, bx1, by1 = k.box
            iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
            ih = max(0.0, min(ay1, by1) - max(ay0, by0))
            inter = iw * ih
            union = ((ax1 - ax0) * (ay1 - ay0)
                     + (bx1 - bx0) * (by1 - by0) - inter)
            if union > 0 and inter / union > overlap:
                ok = False
        if ok:
            keep.append(d)
    return keep


def test_nms_matches_reference_on_random_boxes():
    rng = np.random.RandomState(9)
    for _ in range(5):
        dets = []
        for _ in range(10):
            x0, y0 = rng.uniform(0, 20, size=2)
            w, h = rng.uniform(2, 10, size=2)
            dets.append(tsm.Detection(float(rng.randn()), {0: (x0, y0)}, 0,
                                      (x0, y0, x0 + w, y0 + h)))
        for ov in (0.2, 0.5):
            assert tsm.nms(dets, ov) == reference_nms(dets, ov)


# --------------------------------------------------------------- training

SEP_IDX = (30, 36, 45, 48, 54)
SEP_PARENTS = {30: None, 36: 30, 45: 30, 48: 30, 54: 30}
SEP_OFFS = {30: (32, 30), 36: (18, 20), 45: (46, 20), 48: (22, 46),
            54: (42, 46)}


def blob_face(seed, size=64):
    r = np.random.RandomState(seed)
    img = 0.45 + 0.04 * r.randn(size, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    pts = np.full((68, 2), np.nan)
    for k, li in enumerate(SEP_IDX):
        x, y = SEP_OFFS[li]
        x += r.randint(-2, 3)
        y += r.randint(-2, 3)
        amp = (0.55, -0.45, -0.45, 0.5, 0.5)[k]
        s = (2.5, 2.0, 2.0, 3.0, 3.0)[k]
        img += amp * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * s * s))
        pts[li] = (x, y)
    return np.clip(img, 0, 1), LandmarkSet(pts, sparse_index=SEP_IDX)


def noise_image(seed, size=64):
    r = np.random.RandomState(seed)
    return np.clip(0.45 + 0.12 * r.randn(size, size), 0, 1)


def test_train_insufficient_examples_raises():
    img, lms = blob_face(0)
    cfg = tsm.TrainConfig(min_examples=5, sparse_index=SEP_IDX,
                          parent_map=SEP_PARENTS)
    with pytest.raises(tsm.TrainingDataError):
        tsm.train_tsm([(img, lms, 0), (img, lms, 0)], cfg)


def test_train_separates_faces_from_noise():
    faces = [blob_face(100 + i) for i in range(20)]
    negs = [noise_image(500 + i) for i in range(10)]
    cfg = tsm.TrainConfig(part_cells=4, scale_factor=1.0,
                          sparse_index=SEP_IDX, parent_map=SEP_PARENTS,
                          min_examples=5, seed=2,
                          negative_images=tuple(negs[:5]))
    m = tsm.train_tsm([(im, lm, 0) for im, lm in faces], cfg)[0]

    def best(im):
        pyr = build_pyramid(im, 1, 0.5, 2)
        return max(d.score for d in tsm.dp_infer(m, pyr, -1e9))

    pos = [best(im) for im, _ in faces]
    neg = [best(im) for im in negs]
    assert min(pos) > max(neg)


def test_train_single_example_memorizes():
    from crossface.synthetic import frontal_landmarks
    size = 100
    lms = frontal_landmarks(size)
    pts = lms.points
    r = np.random.RandomState(3)
    img = 0.4 + 0.05 * r.randn(size, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    for k, li in enumerate(lms.sparse_index):
        x, y = pts[li]
        s = 2.0 + (k % 3)
        amp = 0.5 if k % 2 else -0.35
        img += amp * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * s * s))
    img = np.clip(img, 0, 1)
    cfg = tsm.TrainConfig(min_examples=1, scale_factor=0.5, seed=1)
    m = tsm.train_tsm([(img, lms, 0)], cfg)[0]
    pyr = build_pyramid(img, 2, 0.5, cell_size=2)
    best = tsm.dp_infer(m, pyr, -np.inf)[0]
    scale = pyr.levels[best.level][0]
    for pid, li in m.landmark_map.items():
        px, py = best.locations[pid]
        ax, ay = pts[li]
        err_cells = max(abs(px - ax), abs(py - ay)) * scale / m.cell_size
        assert err_cells <= 1.0


def test_train_face_size_halved_by_scale_factor():
    from crossface.synthetic import frontal_landmarks
    lms = frontal_landmarks(100)
    img = np.clip(0.5 + 0.1 * np.random.RandomState(0).randn(100, 100), 0, 1)
    cfg = tsm.TrainConfig(part_cells=4, min_examples=1, scale_factor=0.5,
                          mining_rounds=0, negatives_per_part=4)
    m = tsm.train_tsm([(img, lms, 0), (img, lms, 0)], cfg)[0]
    assert m.train_face_size == 50.0


# ---------------------------------------------------------- serialization

def test_model_roundtrip_bit_exact(tmp_path):
    rng = np.random.RandomState(10)
    m = random_tree_model(rng, 4)
    p1 = tmp_path / "m.json"
    p2 = tmp_path / "m2.json"
    tsm.save_tree_model(p1, m)
    m2 = tsm.load_tree_model(p1)
    tsm.save_tree_model(p2, m2)
    assert p1.read_bytes() == p2.read_bytes()
    grid = rng.rand(6, 6, 2)
    pyr = make_pyramid([grid])
    d1 = tsm.dp_infer(m, pyr, -np.inf)[0]
    d2 = tsm.dp_infer(m2, pyr, -np.inf)[0]
    assert d1.score == d2.score and d1.locations == d2.locations


def test_model_payload_rejects_garbage(tmp_path):
    with pytest.raises(FormatError):
        tsm.tree_model_from_payload({"parts": []})


# ------------------------------------------------------------ cascade

def test_cascade_restricts_fine_levels_and_finds_face():
    faces = [blob_face(200 + i) for i in range(8)]
    examples = [(im, lm, 0) for im, lm in faces]
    fine_cfg = tsm.TrainConfig(part_cells=4, scale_factor=1.0,
                               sparse_index=SEP_IDX, parent_map=SEP_PARENTS,
                               min_examples=4, seed=3, mining_rounds=1)
    coarse_cfg = tsm.TrainConfig(part_cells=3, scale_factor=0.5,
                                 sparse_index=SEP_IDX,
                                 parent_map=SEP_PARENTS, min_examples=4,
                                 seed=4, mining_rounds=1)
    fine = tsm.train_tsm(examples, fine_cfg)[0]
    coarse = tsm.train_tsm(examples, coarse_cfg)[0]
    assert coarse.train_face_size == pytest.approx(32.0)
    img, _ = faces[0]
    pyr = build_pyramid(img, 3, 0.5, cell_size=2)
    full = tsm.dp_infer(fine, pyr, -1e9)[0]
    casc = tsm.cascade_detect(coarse, fine, pyr, -1e9, -1e9)
    assert casc, "cascade produced no detections"
    assert casc[0].score == pytest.approx(full.score, abs=1e-9)
    assert casc[0].locations == full.locations
