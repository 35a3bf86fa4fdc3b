import math

import numpy as np
import pytest

from semistereo.analysis import (
    CostCurve,
    basin_width,
    boundary_cost_inflation,
    cost_curve,
    curve_entropy,
    curve_stats,
    disparity_edges,
    emit_report,
    feature_cost_volume,
    photometric_cost_volume,
)
from semistereo.data import StereoSample, ToySceneSpec, generate_toy_pair
from semistereo.errors import ConfigError, ContractError, DataError
from semistereo.model import ModelConfig, init_params

TINY = ModelConfig(base_channels=4, max_displacement=4)


def _curve(costs, gt=None):
    costs = np.asarray(costs, np.float64)
    return CostCurve(
        sample_id="t",
        pixel=(0, 0),
        metric="photometric",
        level=1,
        candidates=np.arange(len(costs), dtype=np.float64),
        costs=costs,
        oob=np.zeros(len(costs), bool),
        gt_disparity=gt,
    )


# ------------------------------------------------------------------ entropy


def test_entropy_uniform_for_constant_curve():
    assert curve_entropy(_curve([0.7] * 5)) == pytest.approx(math.log(5))


def test_entropy_sharp_minimum_near_zero():
    costs = np.ones(16)
    costs[3] = 0.0
    assert curve_entropy(_curve(costs), temperature=0.01) < 0.01


def test_entropy_hand_softmax_case():
    # normalized costs [0, .5, 1], tau=.5 -> softmax([0,-1,-2])
    p = np.exp([0.0, -1.0, -2.0])
    p /= p.sum()
    expected = float(-(p * np.log(p)).sum())
    assert curve_entropy(_curve([0.0, 0.5, 1.0]), temperature=0.5) == pytest.approx(expected, abs=1e-12)


def test_entropy_bounds_random_curves():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        e = curve_entropy(_curve(rng.random(n) * rng.uniform(0.1, 100)))
        assert 0.0 <= e <= math.log(n) + 1e-12


def test_entropy_affine_invariance():
    rng = np.random.default_rng(1)
    costs = rng.random(20)
    base = curve_entropy(_curve(costs))
    for a, b in ((3.0, 0.0), (0.25, 7.0), (1000.0, -5.0)):
        assert abs(curve_entropy(_curve(a * costs + b)) - base) < 1e-9


def test_entropy_temperature_contract():
    with pytest.raises(ContractError):
        curve_entropy(_curve([0, 1]), temperature=0.0)


# -------------------------------------------------------------- basin width


def test_basin_v_shape_full_width():
    costs = np.abs(np.arange(11) - 5).astype(float)
    assert basin_width(_curve(costs)) == 11


def test_basin_hand_traced_case():
    assert basin_width(_curve([1.0, 0.0, 1.0, 0.5, 2.0])) == 3


def test_basin_constant_curve_all_ties():
    assert basin_width(_curve([2.0] * 9)) == 9


def test_basin_random_unimodal_full_width():
    rng = np.random.default_rng(2)
    for _ in range(25):
        n = int(rng.integers(3, 30))
        m = int(rng.integers(0, n))
        left = np.sort(rng.random(m))[::-1] + 0.01
        right = np.sort(rng.random(n - m - 1)) + 0.01
        costs = np.concatenate([left, [0.0], right])
        assert basin_width(_curve(costs)) == n


# -------------------------------------------------------------- cost curves


def test_photometric_curve_argmin_at_gt():
    spec = ToySceneSpec(width=64, height=32, n_layers=1, disparity_range=(4, 4), texture_scale=1)
    s = generate_toy_pair(spec, 3)
    curve = cost_curve(s, None, pixel=(40, 16), max_disp=10, metric="photometric")
    assert float(curve.candidates[np.argmin(curve.costs)]) == 4.0
    assert curve.gt_disparity == 4.0
    assert curve.costs[4] < 1e-9


def test_photometric_curve_argmin_mostly_within_1px():
    spec = ToySceneSpec(width=64, height=32, n_layers=2, disparity_range=(2, 8), texture_scale=1)
    s = generate_toy_pair(spec, 4)
    rng = np.random.default_rng(5)
    ys, xs = np.nonzero(~s.gt_occlusion)
    vol, oob = photometric_cost_volume(s, 10, 1)
    hits = 0
    count = 30
    sel = rng.choice(len(ys), size=count, replace=False)
    for i in sel:
        y, x = int(ys[i]), int(xs[i])
        costs = vol[:, y, x].copy()
        flags = oob[:, y, x]
        costs[flags] = costs[~flags].max()
        arg = int(np.argmin(costs))
        hits += abs(arg - s.gt_disparity[y, x]) <= 1.0
    assert hits >= 0.9 * count


def test_textureless_curve_constant_in_frame():
    img = np.full((16, 32, 3), 0.5, np.float32)
    s = StereoSample("flat", img, img, domain="synthetic")
    curve = cost_curve(s, None, pixel=(20, 8), max_disp=8, metric="photometric")
    in_frame = ~curve.oob
    assert np.allclose(curve.costs[in_frame], curve.costs[in_frame][0], atol=1e-12)


def test_feature_curve_minimum_at_constructed_shift():
    # right image is the left shifted by 8px: at tap stride 4 the features
    # shift by 2 columns, so the cosine cost bottoms out at d=8
    rng = np.random.default_rng(6)
    wide = rng.integers(0, 256, (64, 136, 3), dtype=np.uint8).astype(np.float32) / np.float32(255)
    left, right = wide[:, :128], wide[:, 8:136]
    s = StereoSample("shifted", left, right, domain="synthetic")
    params = init_params(TINY, 0)
    curve = cost_curve(s, params, pixel=(64, 32), max_disp=12, metric="cosine", level=4, config=TINY)
    assert curve.level == 4
    assert float(curve.candidates[np.argmin(curve.costs)]) == 8.0
    assert curve.costs[8] < 1e-6


def test_cost_curve_contracts():
    s = generate_toy_pair(ToySceneSpec(width=32, height=16), 0)
    with pytest.raises(ConfigError):
        cost_curve(s, None, (4, 4), max_disp=32, metric="photometric")
    with pytest.raises(ContractError):
        cost_curve(s, None, (40, 4), max_disp=4, metric="photometric")
    with pytest.raises(ConfigError):
        cost_curve(s, None, (4, 4), max_disp=4, metric="cosine")  # no config


def test_curve_stats_fields():
    c = _curve([1.0, 0.2, 0.9, 1.5], gt=2.0)
    st = curve_stats(c)
    assert st.argmin_disparity == 1.0
    assert st.cost_at_gt == pytest.approx(0.9)
    assert st.basin_width >= 1
    assert 0 <= st.entropy <= math.log(4)


# ------------------------------------------------------ boundary inflation


def test_disparity_edges_on_step():
    gt = np.zeros((6, 10))
    gt[:, 5:] = 4.0
    e = disparity_edges(gt)
    assert e[:, 4].all() and e[:, 5].all()
    assert not e[:, :4].any() and not e[:, 6:].any()


def test_boundary_inflation_photometric_toy():
    spec = ToySceneSpec(width=96, height=64, n_layers=2, disparity_range=(2, 9), texture_scale=1)
    s = generate_toy_pair(spec, 8)
    out = boundary_cost_inflation(s, None, "photometric", band=2, n_pixels=20,
                                  rng=np.random.default_rng(0))
    assert np.isfinite(out["ratio"]) and out["ratio"] >= 0
    assert out["near_mean"] >= 0 and out["far_mean"] >= 0
    # photometric windows straddle the discontinuity: near must cost more
    assert out["near_mean"] > out["far_mean"]


def test_boundary_inflation_feature_metric_runs():
    spec = ToySceneSpec(width=128, height=64, n_layers=2, disparity_range=(2, 9), texture_scale=1)
    s = generate_toy_pair(spec, 1)  # layers at d=3 and d=9: a real discontinuity
    params = init_params(TINY, 0)
    out = boundary_cost_inflation(s, params, "cosine", band=2, n_pixels=10,
                                  rng=np.random.default_rng(1), config=TINY, level=2)
    assert np.isfinite(out["ratio"]) and out["ratio"] >= 0


def test_boundary_inflation_insufficient_data():
    s = generate_toy_pair(ToySceneSpec(width=64, height=32, n_layers=2, disparity_range=(2, 8)), 0)
    with pytest.raises(DataError):
        boundary_cost_inflation(s, None, "photometric", band=40, n_pixels=10)
    with pytest.raises(DataError):
        boundary_cost_inflation(s, None, "photometric", band=2, n_pixels=10 **
                                5)


# ---------------------------------------------------------------- reporting


def _toy_curves():
    spec = ToySceneSpec(width=128, height=64, n_layers=2, disparity_range=(2, 7), texture_scale=1)
    s = generate_toy_pair(spec, 11)
    params = init_params(TINY, 0)
    pixel = (53, 33)
    curves = [
        cost_curve(s, None, pixel, 10, "photometric"),
        cost_curve(s, params, pixel, 10, "cosine", level=2, config=TINY),
    ]
    return curves, [curve_stats(c) for c in curves]


def test_emit_report_files_and_schema(tmp_path):
    curves, stats = _toy_curves()
    written = emit_report(curves, stats, tmp_path / "out")
    names = sorted(p.name for p in written)
    assert "curves.csv" in names and "stats.csv" in names
    plots = [n for n in names if n.endswith(".png")]
    assert len(plots) == 1  # two metrics, one pixel, one overlay plot
    lines = (tmp_path / "out" / "curves.csv").read_text().splitlines()
    assert lines[0] == "sample_id,x,y,metric,level,d,cost"
    assert len(lines) == 1 + 2 * 11  # two curves, 11 candidates each
    stats_lines = (tmp_path / "out" / "stats.csv").read_text().splitlines()
    assert stats_lines[0] == "sample_id,x,y,metric,entropy,argmin,basin_width,cost_at_gt,gt"
    assert len(stats_lines) == 3


def test_emit_report_rerun_byte_identical(tmp_path):
    curves, stats = _toy_curves()
    emit_report(curves, stats, tmp_path / "a")
    emit_report(curves, stats, tmp_path / "b")
    for name in ("curves.csv", "stats.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    pngs = sorted((tmp_path / "a").glob("*.png"))
    for p in pngs:
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_emit_report_empty_error(tmp_path):
    with pytest.raises(DataError):
        emit_report([], [], tmp_path / "x")
