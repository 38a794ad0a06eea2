import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from patchforge import (
    AreaRatioCurve,
    AttackConfig,
    AttackMode,
    EvalReport,
    GridPredictions,
    InvalidInputError,
    RatioPoint,
    SuccessRule,
    SweepGrid,
    area_ratio_curve,
    interference_heatmap,
    run_sweep,
    success_rate,
    windowed_success,
)
from patchforge.attack import init_patch
from patchforge.detector import ToyDetector, ToyDetectorConfig
from patchforge.evaluation import (
    CLOUDY,
    SUNNY,
    _pool_adjacent_violators,
    save_curve_png,
    save_heatmap_png,
)
from patchforge.losses import feature_interference, feature_region_crop, mean_pool_features
from patchforge.scene import SceneSpec, render_scene, rendered_target_box

from conftest import hide_config


class _ConstModel:
    """Fixed-output detector so sweep mechanics are testable without training."""

    input_size = 104
    grid = (13, 13)
    num_classes = 4
    tap_layer_ids = ()

    def __init__(self, conf, top_prob, top_class=0):
        probs = torch.full((169, 4), (1.0 - top_prob) / 3.0)
        probs[:, top_class] = top_prob
        self._conf = torch.full((169,), conf)
        self._probs = probs

    def predict(self, image, tap_layers=None):
        return GridPredictions(self._conf, self._probs, self.grid), []


ALWAYS_FIRES = _ConstModel(conf=0.9, top_prob=0.8)
NEVER_FIRES = _ConstModel(conf=0.1, top_prob=0.8)


@pytest.fixture(scope="module")
def fresh_model():
    model = ToyDetector(ToyDetectorConfig(seed=7))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# frame-rate arithmetic


def test_success_rate_fixtures():
    assert success_rate([True] * 8) == 100.0
    assert success_rate([True, False, True, False]) == 50.0
    many = [True] * 917 + [False] * (963 - 917)
    assert success_rate(many) == pytest.approx(95.22, abs=0.01)
    with pytest.raises(InvalidInputError):
        success_rate([])


def test_windowed_constant_series():
    rates = windowed_success([True] * 150, window=100)
    assert rates.series == [100.0] * 51
    assert rates.best == 100.0
    assert not rates.truncated


def test_windowed_unit_step_descent():
    outcomes = [True] * 100 + [False] * 100
    rates = windowed_success(outcomes, window=100)
    assert rates.series == pytest.approx(list(np.arange(100.0, -1.0, -1.0)))
    assert rates.best == 100.0


def test_windowed_truncation_and_validation():
    short = windowed_success([True, False], window=100)
    assert short.truncated
    assert short.series == [50.0]
    assert short.best == 50.0
    with pytest.raises(InvalidInputError):
        windowed_success([True], window=0)
    with pytest.raises(InvalidInputError):
        windowed_success([], window=10)


@given(st.lists(st.booleans(), min_size=1, max_size=6).flatmap(
    lambda chunks: st.just([b for b in chunks for _ in range(10)])))
@settings(max_examples=100, deadline=None)
def test_windowed_max_dominates_mean_on_divisible_lengths(outcomes):
    # with window | n the disjoint partition is a subset of the stride-1
    # series, so the best window cannot fall below the overall rate
    rates = windowed_success(outcomes, window=10)
    assert rates.best >= success_rate(outcomes) - 1e-9
    assert 0.0 <= rates.best <= 100.0


def test_windowed_agrees_with_brute_force():
    rng = np.random.default_rng(5)
    outcomes = [bool(b) for b in rng.integers(0, 2, size=57)]
    rates = windowed_success(outcomes, window=13)
    brute = [success_rate(outcomes[i:i + 13]) for i in range(len(outcomes) - 12)]
    assert rates.series == pytest.approx(brute)


# ---------------------------------------------------------------------------
# sweeps


def test_sweep_grid_validation():
    with pytest.raises(InvalidInputError):
        SweepGrid(scale_bins=())
    with pytest.raises(InvalidInputError):
        SweepGrid(frames_per_cell=0)
    grid = SweepGrid.standard(frames_per_cell=4)
    assert grid.cell_count() == 5 * 4 * 2
    assert grid.frames_per_cell == 4


def small_grid(frames=2):
    return SweepGrid(scale_bins=(1.0, 0.5), angle_bins=(0.0, 45.0),
                     illumination_bins=(CLOUDY, SUNNY), frames_per_cell=frames)


def test_sweep_shape_and_frame_accounting(corpus):
    report = run_sweep(ALWAYS_FIRES, corpus, None, small_grid(3), SuccessRule.DETECT)
    assert len(report.cells) == 8
    assert report.total_frames == sum(c.frames for c in report.cells) == 24
    assert all(c.frames == 3 for c in report.cells)
    assert all(0.0 <= c.rate <= 100.0 for c in report.cells)
    assert report.windowed.truncated


def test_sweep_const_model_rates(corpus):
    detect = run_sweep(ALWAYS_FIRES, corpus, None, small_grid(), SuccessRule.DETECT)
    assert detect.overall == 100.0
    hide = run_sweep(ALWAYS_FIRES, corpus, None, small_grid(), SuccessRule.HIDE)
    assert hide.overall == 0.0


def test_sweep_hide_is_complement_of_detect(fresh_model, corpus):
    detect = run_sweep(fresh_model, corpus, None, small_grid(), SuccessRule.DETECT, seed=3)
    hide = run_sweep(fresh_model, corpus, None, small_grid(), SuccessRule.HIDE, seed=3)
    for d, h in zip(detect.cells, hide.cells):
        assert d.rate + h.rate == pytest.approx(100.0)


def test_sweep_is_seeded(fresh_model, corpus):
    a = run_sweep(fresh_model, corpus, None, small_grid(), SuccessRule.DETECT, seed=11)
    b = run_sweep(fresh_model, corpus, None, small_grid(), SuccessRule.DETECT, seed=11)
    assert a.to_dict() == b.to_dict()


def test_sweep_appear_without_patch_judges_bare_background(corpus):
    report = run_sweep(NEVER_FIRES, corpus, None, small_grid(), SuccessRule.APPEAR)
    assert report.overall == 0.0
    assert all(c.rate == 0.0 for c in report.cells)


def test_report_filters_and_marginals():
    from patchforge.evaluation import CellResult

    cells = [
        CellResult(scale=1.0, angle=0.0, illumination="cloudy", rate=80.0, frames=2),
        CellResult(scale=1.0, angle=0.0, illumination="sunny", rate=40.0, frames=6),
    ]
    er = EvalReport(rule=SuccessRule.DETECT, cells=cells, overall=50.0, total_frames=8)
    assert er.rates_by(scale=1.0) == cells
    assert er.rates_by(illumination="sunny") == [cells[1]]
    assert er.rates_by(scale=0.5) == []
    # marginals weight by frame count, not by cell
    assert er.marginal(scale=1.0) == pytest.approx((80.0 * 2 + 40.0 * 6) / 8)
    with pytest.raises(InvalidInputError):
        er.marginal(scale=0.25)


# ---------------------------------------------------------------------------
# interference heatmaps


def test_heatmap_shape_zero_column_and_oracle(fresh_model, corpus):
    cfg = hide_config(seed=2).resolved_for(fresh_model)
    template = init_patch(cfg, corpus)
    rec = next(r for r in corpus.records if r.target_box is not None)
    spec = SceneSpec(background_id=rec.background_id,
                     placement_box=rec.target_box,
                     view_angle=0.0, scale=1.0, grayscale_factor=0.0,
                     noise_sigma=0.0, seed=4)
    checkpoints = [(-1, None), (50, template.pixels),
                   (100, (template.pixels * 0.5).clone())]
    heat = interference_heatmap(fresh_model, corpus, template, checkpoints, spec)
    layers = tuple(fresh_model.conv_layer_ids)
    assert heat.matrix.shape == (len(layers), 3)
    assert heat.layer_ids == layers
    assert heat.iterations == (-1, 50, 100)
    assert np.all(heat.matrix[:, 0] == 0.0)
    assert np.all(heat.matrix >= 0.0)

    # scripted recomputation of one perturbed entry
    record = corpus.record(spec.background_id)
    box = rendered_target_box(record, corpus.target, spec)
    with torch.no_grad():
        clean = render_scene(record, corpus.target, None, spec)
        adv = render_scene(record, corpus.target, template, spec)
        _, taps_clean = fresh_model.predict(clean, tap_layers=layers)
        _, taps_adv = fresh_model.predict(adv, tap_layers=layers)
    for l in range(len(layers)):
        a = mean_pool_features(feature_region_crop(taps_clean[l], box).double())
        b = mean_pool_features(feature_region_crop(taps_adv[l], box).double())
        want = float(feature_interference(a, b)) / taps_clean[l].activations.shape[0]
        assert heat.matrix[l, 1] == pytest.approx(want, abs=1e-9)


def test_heatmap_rejects_empty_checkpoints(fresh_model, corpus):
    cfg = hide_config().resolved_for(fresh_model)
    template = init_patch(cfg, corpus)
    rec = next(r for r in corpus.records if r.target_box is not None)
    spec = SceneSpec(background_id=rec.background_id,
                     placement_box=rec.target_box,
                     view_angle=0.0, scale=1.0, grayscale_factor=0.0,
                     noise_sigma=0.0, seed=4)
    with pytest.raises(InvalidInputError):
        interference_heatmap(fresh_model, corpus, template, [], spec)


def test_heatmap_png_writer(tmp_path, fresh_model, corpus):
    cfg = hide_config().resolved_for(fresh_model)
    template = init_patch(cfg, corpus)
    rec = next(r for r in corpus.records if r.target_box is not None)
    spec = SceneSpec(background_id=rec.background_id,
                     placement_box=rec.target_box,
                     view_angle=0.0, scale=1.0, grayscale_factor=0.0,
                     noise_sigma=0.0, seed=4)
    heat = interference_heatmap(fresh_model, corpus, template, [(-1, None)], spec)
    out = tmp_path / "heat.png"
    save_heatmap_png(heat, out)
    assert out.stat().st_size > 0


# ---------------------------------------------------------------------------
# area-ratio curves


def test_pava_merges_violators():
    assert _pool_adjacent_violators([10.0, 30.0, 20.0, 50.0]) == [10.0, 25.0, 25.0, 50.0]
    assert _pool_adjacent_violators([3.0, 2.0, 1.0]) == [2.0, 2.0, 2.0]
    assert _pool_adjacent_violators([1.0, 2.0, 3.0]) == [1.0, 2.0, 3.0]


def test_monotone_fit_reports_residuals():
    curve = AreaRatioCurve(points=[
        RatioPoint(0.3, 20.0, 10), RatioPoint(0.1, 10.0, 10), RatioPoint(0.2, 30.0, 10),
    ])
    fit = curve.monotone_fit()
    assert fit["ratios"] == [0.1, 0.2, 0.3]
    assert fit["fitted"] == [10.0, 25.0, 25.0]
    assert fit["max_abs_residual"] == pytest.approx(5.0)


def test_monotone_fit_flat_on_sorted_rates():
    curve = AreaRatioCurve(points=[RatioPoint(0.1, 5.0, 4), RatioPoint(0.2, 9.0, 4)])
    fit = curve.monotone_fit()
    assert fit["fitted"] == [5.0, 9.0]
    assert fit["max_abs_residual"] == 0.0


def test_rate_at_lookup():
    curve = AreaRatioCurve(points=[RatioPoint(0.25, 42.0, 7)])
    assert curve.rate_at(0.25) == 42.0
    with pytest.raises(InvalidInputError):
        curve.rate_at(0.1)


def test_area_curve_validation(fresh_model, corpus):
    with pytest.raises(InvalidInputError):
        area_ratio_curve(fresh_model, corpus, [0.2],
                         AttackConfig(mode=AttackMode.APPEAR), trials_per_ratio=2)
    with pytest.raises(InvalidInputError):
        area_ratio_curve(fresh_model, corpus, [0.0], hide_config(), trials_per_ratio=2)
    with pytest.raises(InvalidInputError):
        area_ratio_curve(fresh_model, corpus, [0.2], hide_config(), trials_per_ratio=0)


def test_area_curve_end_to_end_shape(fresh_model, corpus):
    cfg = hide_config(iterations=2, batch_size=1)
    curve = area_ratio_curve(fresh_model, corpus, [0.1, 0.2], cfg, trials_per_ratio=3, seed=5)
    assert [p.ratio for p in curve.points] == [0.1, 0.2]
    assert all(p.trials == 3 for p in curve.points)
    assert all(0.0 <= p.rate <= 100.0 for p in curve.points)


def test_curve_png_writer(tmp_path):
    curve = AreaRatioCurve(points=[RatioPoint(0.1, 10.0, 5), RatioPoint(0.2, 60.0, 5)])
    out = tmp_path / "curve.png"
    save_curve_png(curve, out)
    assert out.stat().st_size > 0
