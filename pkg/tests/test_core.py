"""Core geometry: similarity alignment, yaw estimation, landmark metric."""

import math

import numpy as np
import pytest

from crossface.core import (
    DEFAULT_SPARSE_INDEX,
    LEFT_EYE,
    MOUTH_CORNERS,
    RIGHT_EYE,
    YAW_GRID,
    DegenerateGeometryError,
    LandmarkSet,
    NormalizationError,
    SimilarityTransform,
    VisibilityMismatchError,
    align_similarity,
    estimate_yaw,
    landmark_error,
    procrustes_similarity,
    project_yaw,
)


def _known_truth():
    # eye groups collapsed to single positions so normalizers are exact:
    # inter-pupil 40, eye-to-mouth 40
    pts = np.zeros((68, 2))
    pts[:, 0] = np.linspace(5.0, 95.0, 68)
    pts[:, 1] = np.linspace(10.0, 90.0, 68)
    for i in LEFT_EYE:
        pts[i] = (30.0, 40.0)
    for i in RIGHT_EYE:
        pts[i] = (70.0, 40.0)
    pts[48] = (45.0, 80.0)
    pts[54] = (55.0, 80.0)
    return LandmarkSet(pts)


def test_similarity_apply_hand_computed():
    t = SimilarityTransform(scale=2.0, rotation=math.pi / 2, tx=1.0, ty=-3.0)
    out = t.apply([(1.0, 0.0)])
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-12)


def test_similarity_inverse_roundtrip():
    np.random.seed(3)
    t = SimilarityTransform(scale=1.7, rotation=0.6, tx=4.0, ty=-2.5)
    pts = np.random.rand(12, 2) * 50.0
    back = t.inverse().apply(t.apply(pts))
    assert np.allclose(back, pts, atol=1e-10)


def test_similarity_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        SimilarityTransform(scale=0.0, rotation=0.0, tx=0.0, ty=0.0)


def test_procrustes_recovers_exact_transform():
    np.random.seed(7)
    src = np.random.rand(10, 2) * 100.0
    true = SimilarityTransform(scale=1.7, rotation=0.4, tx=3.0, ty=-2.0)
    est = procrustes_similarity(src, true.apply(src))
    assert abs(est.scale - 1.7) < 1e-10
    assert abs(est.rotation - 0.4) < 1e-10
    assert abs(est.tx - 3.0) < 1e-8
    assert abs(est.ty + 2.0) < 1e-8


def test_procrustes_no_reflection():
    # mirrored target still yields a proper rotation (det +1)
    np.random.seed(8)
    src = np.random.rand(20, 2)
    dst = src * np.array([-1.0, 1.0])
    est = procrustes_similarity(src, dst)
    assert est.scale > 0
    m = est.matrix()
    assert np.linalg.det(m) > 0


def test_procrustes_coincident_source_raises():
    src = np.ones((5, 2))
    dst = np.random.rand(5, 2)
    with pytest.raises(DegenerateGeometryError):
        procrustes_similarity(src, dst)


def test_landmark_set_validation():
    with pytest.raises(ValueError):
        LandmarkSet(np.zeros((67, 2)))
    pts = np.random.RandomState(0).rand(68, 2)
    pts[5] = np.nan
    ls = LandmarkSet(pts)
    assert not ls.visible[5] and ls.visible[6]
    with pytest.raises(ValueError):
        LandmarkSet(np.zeros((68, 2)), sparse_index=(4, 4))
    with pytest.raises(ValueError):
        LandmarkSet(np.zeros((68, 2)), sparse_index=(2, 1))
    with pytest.raises(ValueError):
        LandmarkSet(np.zeros((68, 2)), sparse_index=())


def test_default_sparse_index_shape():
    assert len(DEFAULT_SPARSE_INDEX) == 19
    assert list(DEFAULT_SPARSE_INDEX) == sorted(DEFAULT_SPARSE_INDEX)
    ls = LandmarkSet(np.random.RandomState(1).rand(68, 2))
    assert ls.sparse_points().shape == (19, 2)


def test_align_similarity_uses_shared_visible_only():
    np.random.seed(11)
    base = np.random.rand(68, 2) * 80.0
    true = SimilarityTransform(scale=1.2, rotation=-0.3, tx=5.0, ty=1.0)
    moved = true.apply(base)
    moved[10] += 500.0  # gross outlier, hidden in src
    vis_src = np.ones(68, bool)
    vis_src[10] = False
    src = LandmarkSet(base, vis_src)
    dst = LandmarkSet(moved)
    est = align_similarity(src, dst)
    assert abs(est.scale - 1.2) < 1e-9
    assert abs(est.rotation + 0.3) < 1e-9

    few = LandmarkSet(base, np.zeros(68, bool) | (np.arange(68) == 0))
    with pytest.raises(DegenerateGeometryError):
        align_similarity(few, dst)


def test_project_yaw_frontal_and_profile():
    ref = np.zeros((4, 3))
    ref[:, 0] = [-1.0, 1.0, 0.0, 0.0]
    ref[:, 1] = [0.0, 0.0, -1.0, 1.0]
    ref[:, 2] = [0.0, 0.0, 0.0, 4.0]
    front = project_yaw(ref, 0.0)
    assert np.allclose(front[:, 0], ref[:, 0], atol=1e-12)
    prof = project_yaw(ref, 90.0)
    # at 90 degrees the x coordinate becomes centered depth
    assert np.allclose(prof[:, 0], ref[:, 2] - 1.0, atol=1e-12)
    assert np.allclose(prof[:, 1], ref[:, 1], atol=1e-12)


def test_estimate_yaw_exact_on_grid():
    np.random.seed(21)
    ref = np.random.rand(68, 3) * np.array([80.0, 100.0, 40.0])
    for yaw in (-90, -45, 0, 15, 60):
        proj = project_yaw(ref, yaw)
        t = SimilarityTransform(scale=1.4, rotation=0.2, tx=30.0, ty=-8.0)
        est = estimate_yaw(LandmarkSet(t.apply(proj)), ref)
        assert est.yaw_deg == yaw
        assert est.residual < 1e-8


def test_estimate_yaw_with_occlusion():
    np.random.seed(22)
    ref = np.random.rand(68, 3) * np.array([80.0, 100.0, 40.0])
    proj = project_yaw(ref, 75.0)
    vis = np.ones(68, bool)
    vis[::3] = False
    pts = proj.copy()
    pts[~vis] = np.nan
    est = estimate_yaw(LandmarkSet(pts, vis), ref)
    assert est.yaw_deg == 75.0


def test_estimate_yaw_needs_four_visible():
    ref = np.random.RandomState(2).rand(68, 3)
    pts = np.full((68, 2), np.nan)
    pts[:3] = [[0, 0], [1, 0], [0, 1]]
    with pytest.raises(DegenerateGeometryError):
        estimate_yaw(LandmarkSet(pts), ref)


def test_yaw_grid_coverage():
    assert YAW_GRID[0] == -90 and YAW_GRID[-1] == 90
    assert len(YAW_GRID) == 13
    assert all(b - a == 15 for a, b in zip(YAW_GRID, YAW_GRID[1:]))


def test_landmark_error_hand_computed():
    truth = _known_truth()
    pred = truth.with_points(truth.points + np.array([3.0, 4.0]))
    # mean error 5, inter-pupil 40 -> 12.5%
    assert abs(landmark_error(pred, truth, 0.0) - 12.5) < 1e-12
    assert abs(landmark_error(pred, truth, 45.0) - 12.5) < 1e-12
    # beyond 45 degrees the eye-to-mouth normalizer (also 40) applies
    assert abs(landmark_error(pred, truth, 60.0) - 12.5) < 1e-12
    assert abs(landmark_error(pred, truth, -90.0) - 12.5) < 1e-12


def test_landmark_error_similarity_invariant():
    np.random.seed(31)
    truth = _known_truth()
    pred = truth.with_points(truth.points + np.random.randn(68, 2) * 2.0)
    base = landmark_error(pred, truth, 0.0)
    t = SimilarityTransform(scale=2.3, rotation=1.1, tx=-40.0, ty=12.0)
    moved = landmark_error(pred.with_points(t.apply(pred.points)),
                           truth.with_points(t.apply(truth.points)), 0.0)
    assert abs(base - moved) < 1e-9
    prof = landmark_error(pred, truth, 75.0)
    moved_prof = landmark_error(pred.with_points(t.apply(pred.points)),
                                truth.with_points(t.apply(truth.points)), 75.0)
    assert abs(prof - moved_prof) < 1e-9


def test_landmark_error_errors():
    truth = _known_truth()
    vis = np.ones(68, bool)
    vis[0] = False
    pred = LandmarkSet(truth.points, vis)
    with pytest.raises(VisibilityMismatchError):
        landmark_error(pred, truth, 0.0)
    flat = LandmarkSet(np.ones((68, 2)))
    with pytest.raises(NormalizationError):
        landmark_error(flat, flat, 0.0)


def test_mouth_corner_indices():
    assert MOUTH_CORNERS == (48, 54)
    assert LEFT_EYE == tuple(range(36, 42))
    assert RIGHT_EYE == tuple(range(42, 48))
