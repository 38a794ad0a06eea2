import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from patchforge import (
    AppearingLossConfig,
    DegenerateGeometryWarning,
    FeatureTap,
    GridPredictions,
    HidingLossConfig,
    InvalidInputError,
)
from patchforge.losses import (
    COLOR_EPS,
    INTERFERENCE_EPS,
    appearing_loss,
    color_loss,
    feature_interference,
    feature_region_crop,
    hiding_loss,
    hiding_loss_terms,
    interference_from_taps,
    mean_pool_features,
    patch_cell_index,
    pattern_loss,
)


def grid_predictions(conf, probs):
    conf = torch.tensor(conf, dtype=torch.float32)
    probs = torch.tensor(probs, dtype=torch.float32)
    return GridPredictions(conf, probs, (1, conf.shape[0]))


# ---------------------------------------------------------------------------
# feature pooling


def test_region_crop_scales_with_outward_rounding():
    acts = torch.arange(2 * 52 * 52, dtype=torch.float32).reshape(2, 52, 52)
    tap = FeatureTap("c4", acts, 0.5)
    crop = feature_region_crop(tap, (10, 20, 30, 41))
    # rows 10..20 (20*0.5 .. ceil(41*0.5)), cols 5..15
    assert crop.shape == (2, 11, 10)
    assert torch.equal(crop, acts[:, 10:21, 5:15])


def test_region_crop_widens_collapsed_span():
    tap = FeatureTap("c8", torch.ones(4, 13, 13), 0.125)
    with pytest.warns(DegenerateGeometryWarning):
        crop = feature_region_crop(tap, (-10, -10, -5, -5))
    assert crop.shape == (4, 1, 1)


def test_region_crop_rejects_empty_box():
    tap = FeatureTap("c2", torch.ones(2, 8, 8), 1.0)
    with pytest.raises(InvalidInputError):
        feature_region_crop(tap, (5, 5, 5, 9))


def test_mean_pool_normalizes():
    region = torch.tensor([[[1.0, 3.0], [5.0, 7.0]], [[0.0, 0.0], [0.0, 2.0]]])
    vec = mean_pool_features(region)
    raw = torch.tensor([4.0, 0.5])
    expected = raw / torch.linalg.vector_norm(raw)
    assert torch.allclose(vec.values, expected, atol=1e-7)
    assert not vec.degenerate
    assert torch.linalg.vector_norm(vec.values) == pytest.approx(1.0, abs=1e-6)


def test_mean_pool_zero_region_is_degenerate():
    vec = mean_pool_features(torch.zeros(3, 4, 4))
    assert vec.degenerate
    assert torch.equal(vec.values, torch.zeros(3))


def test_feature_interference_squared_distance():
    a = mean_pool_features(torch.tensor([[[1.0]], [[0.0]]]))
    b = mean_pool_features(torch.tensor([[[0.0]], [[1.0]]]))
    assert float(feature_interference(a, b)) == pytest.approx(2.0, abs=1e-7)
    assert float(feature_interference(a, a)) == 0.0


def test_feature_interference_rejects_length_mismatch():
    a = mean_pool_features(torch.ones(2, 2, 2))
    b = mean_pool_features(torch.ones(3, 2, 2))
    with pytest.raises(InvalidInputError):
        feature_interference(a, b)


def test_interference_from_taps_weights_layers():
    acts_clean = torch.zeros(2, 8, 8)
    acts_clean[0] = 1.0
    acts_adv = torch.zeros(2, 8, 8)
    acts_adv[1] = 1.0
    box = (0, 0, 8, 8)
    clean = [FeatureTap("c2", acts_clean, 1.0), FeatureTap("c4", acts_clean, 1.0)]
    adv = [FeatureTap("c2", acts_adv, 1.0), FeatureTap("c4", acts_adv, 1.0)]
    # each layer contributes squared distance 2 between unit axes
    total = interference_from_taps(clean, adv, box)
    assert float(total) == pytest.approx(4.0, abs=1e-6)
    weighted = interference_from_taps(clean, adv, box, tap_weights={"c2": 0.5})
    assert float(weighted) == pytest.approx(1.0, abs=1e-6)


def test_interference_from_taps_rejects_mismatch():
    tap = FeatureTap("c2", torch.ones(2, 4, 4), 1.0)
    other = FeatureTap("c4", torch.ones(2, 4, 4), 1.0)
    with pytest.raises(InvalidInputError):
        interference_from_taps([tap], [other], (0, 0, 4, 4))
    with pytest.raises(InvalidInputError):
        interference_from_taps([tap], [], (0, 0, 4, 4))
    with pytest.raises(InvalidInputError):
        interference_from_taps([tap], [tap], (0, 0, 4, 4), tap_weights={"c2": 0.0})


# ---------------------------------------------------------------------------
# hiding objective


def hand_taps():
    clean_acts = torch.tensor([[[1.0, 1.0], [1.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]])
    adv_acts = torch.tensor([[[1.0, 1.0], [1.0, 1.0]], [[2.0, 2.0], [2.0, 2.0]]])
    box = (0, 0, 2, 2)
    return [FeatureTap("c2", clean_acts, 1.0)], [FeatureTap("c2", adv_acts, 1.0)], box


def test_hiding_cell_selection_uses_score_product():
    # cell 1 wins on conf * p_target despite lower raw confidence
    preds = grid_predictions([1.0, 0.9], [[0.5, 0.5, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0]])
    clean, adv, box = hand_taps()
    terms = hiding_loss_terms(preds, clean, adv, HidingLossConfig(), box)
    assert terms.cell_index == 1
    assert float(terms.box_confidence) == pytest.approx(0.9)
    assert float(terms.target_prob) == pytest.approx(0.9)


def test_hiding_loss_is_sum_of_terms():
    preds = grid_predictions([0.8], [[0.7, 0.3, 0.0, 0.0]])
    clean, adv, box = hand_taps()
    cfg = HidingLossConfig()
    terms = hiding_loss_terms(preds, clean, adv, cfg, box)
    loss = hiding_loss(preds, clean, adv, cfg, box)
    expected = (0.8 + 0.7 + 0.1 / (float(terms.interference) + INTERFERENCE_EPS))
    assert float(loss) == pytest.approx(expected, abs=1e-6)


def test_hiding_loss_zero_weight_drops_feature_term():
    preds = grid_predictions([0.8], [[0.7, 0.3, 0.0, 0.0]])
    clean, adv, box = hand_taps()
    cfg = HidingLossConfig(interference_weight=0.0)
    loss = hiding_loss(preds, clean, adv, cfg, box)
    assert float(loss) == pytest.approx(1.5, abs=1e-6)


# ---------------------------------------------------------------------------
# cell routing


@pytest.mark.parametrize("center,expected", [
    ((0.0, 0.0), 0),
    ((103.9, 0.0), 12),
    ((0.0, 103.9), 156),
    ((103.9, 103.9), 168),
    ((52.0, 52.0), 6 * 13 + 6),
    ((7.9, 8.0), 13),  # y exactly on a boundary belongs to the lower row
])
def test_patch_cell_index_fixtures(center, expected):
    assert patch_cell_index(22.0, center, (13, 13), 104) == expected


def test_patch_cell_index_rejects_bad_inputs():
    with pytest.raises(InvalidInputError):
        patch_cell_index(0.0, (50.0, 50.0), (13, 13), 104)
    with pytest.raises(InvalidInputError):
        patch_cell_index(22.0, (104.0, 50.0), (13, 13), 104)
    with pytest.raises(InvalidInputError):
        patch_cell_index(22.0, (-0.1, 50.0), (13, 13), 104)


@given(x=st.floats(min_value=0.0, max_value=103.999),
       y=st.floats(min_value=0.0, max_value=103.999))
@settings(max_examples=200, deadline=None)
def test_patch_cell_index_matches_scan(x, y):
    got = patch_cell_index(10.0, (x, y), (13, 13), 104)
    hits = [
        row * 13 + col
        for row in range(13) for col in range(13)
        if row * 8 <= y < (row + 1) * 8 and col * 8 <= x < (col + 1) * 8
    ]
    assert hits == [got]


# ---------------------------------------------------------------------------
# appearing objective


def test_appearing_loss_uniform_fixture():
    # conf 0, four-way uniform classes: 1 + 0.5625 + 3 * 0.0625 = 1.75
    preds = grid_predictions([0.0], [[0.25, 0.25, 0.25, 0.25]])
    loss = appearing_loss(preds, 0, AppearingLossConfig())
    assert float(loss) == pytest.approx(1.75, abs=1e-7)


def test_appearing_loss_perfect_cell_is_zero():
    preds = grid_predictions([1.0], [[1.0, 0.0, 0.0, 0.0]])
    assert float(appearing_loss(preds, 0, AppearingLossConfig())) == 0.0


def test_appearing_loss_rejects_bad_cell():
    preds = grid_predictions([0.5], [[0.25] * 4])
    with pytest.raises(InvalidInputError):
        appearing_loss(preds, 1, AppearingLossConfig())


# ---------------------------------------------------------------------------
# style objectives


def test_pattern_loss_sums_over_cells():
    preds = grid_predictions([0.5, 0.5], [[0.6, 0.4, 0, 0], [0.1, 0.9, 0, 0]])
    loss = pattern_loss(preds, [0, 1], 1)
    assert float(loss) == pytest.approx(0.6 ** 2 + 0.1 ** 2, abs=1e-6)
    with pytest.raises(InvalidInputError):
        pattern_loss(preds, [], 1)
    with pytest.raises(InvalidInputError):
        pattern_loss(preds, [5], 1)


def test_color_loss_prefers_favored_channel():
    red = torch.zeros(3, 2, 2)
    red[0] = 1.0
    white = torch.ones(3, 2, 2)
    assert float(color_loss(red, "R")) < float(color_loss(white, "R"))
    expected_red = 4 * (1.0 / (1.0 + COLOR_EPS))
    assert float(color_loss(red, "R")) == pytest.approx(expected_red, abs=1e-5)
    with pytest.raises(InvalidInputError):
        color_loss(red, "X")


def test_color_loss_black_pixels_contribute_nothing():
    assert float(color_loss(torch.zeros(3, 4, 4), "G")) == 0.0
