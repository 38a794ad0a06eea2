import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from patchforge import (
    DegenerateGeometryWarning,
    InvalidInputError,
    SceneSpec,
    VariationRanges,
    estimate_view_angle,
    grayscale_transform,
    perspective_warp,
    project_saturation,
    render_scene,
    sample_scene_batch,
)
from patchforge.scene import (
    apply_homography,
    placement_center,
    render_background,
    rendered_target_box,
    warped_extent,
    yaw_homography,
)


def target_record(corpus):
    return next(r for r in corpus.records if r.target_box is not None)


# ---------------------------------------------------------------------------
# spec validation


@pytest.mark.parametrize("field,value", [
    ("placement_box", (10, 10, 10, 20)),
    ("placement_box", (30, 10, 20, 20)),
    ("view_angle", 61.0),
    ("view_angle", -75.0),
    ("scale", 0.0),
    ("scale", 1.01),
    ("grayscale_factor", 1.2),
    ("noise_sigma", -0.01),
    ("brightness", 1.5),
])
def test_scene_spec_rejects_bad_levels(field, value):
    kwargs = dict(background_id="bg", placement_box=(10, 10, 50, 76), view_angle=0.0,
                  scale=1.0, grayscale_factor=0.0, noise_sigma=0.0, seed=0)
    kwargs[field] = value
    with pytest.raises(InvalidInputError):
        SceneSpec(**kwargs)


def test_variation_ranges_reject_inverted():
    with pytest.raises(InvalidInputError):
        VariationRanges(scale=(0.9, 0.3))


def test_pinned_collapses_ranges():
    pinned = VariationRanges().pinned(scale=0.5, angle=30.0)
    assert pinned.scale == (0.5, 0.5)
    assert pinned.angle == (30.0, 30.0)
    assert pinned.grayscale == VariationRanges().grayscale


# ---------------------------------------------------------------------------
# view angle estimation


def test_view_angle_of_half_width_box():
    assert estimate_view_angle(50.0, 100.0) == pytest.approx(60.0, abs=1e-9)


def test_view_angle_square_box_is_zero():
    assert estimate_view_angle(80.0, 80.0) == pytest.approx(0.0)


def test_view_angle_wide_box_warns_and_clamps():
    with pytest.warns(DegenerateGeometryWarning):
        angle = estimate_view_angle(120.0, 80.0)
    assert angle == 0.0


def test_view_angle_rejects_empty_box():
    with pytest.raises(InvalidInputError):
        estimate_view_angle(0.0, 40.0)


@given(angle=st.floats(min_value=0.0, max_value=85.0))
@settings(max_examples=50, deadline=None)
def test_view_angle_inverts_cosine(angle):
    width = 100.0 * math.cos(math.radians(angle))
    if width < 1e-6:
        return
    assert estimate_view_angle(width, 100.0) == pytest.approx(angle, abs=1e-6)


# ---------------------------------------------------------------------------
# homography


@given(angle=st.floats(min_value=-85.0, max_value=85.0),
       u=st.floats(min_value=-50.0, max_value=50.0),
       v=st.floats(min_value=-50.0, max_value=50.0))
@settings(max_examples=100, deadline=None)
def test_yaw_homography_matches_pinhole_formula(angle, u, v):
    width = 100.0
    distance = 2.0 * width
    h = yaw_homography(angle, width)
    theta = math.radians(angle)
    denom = 1.0 - u * math.sin(theta) / distance
    expect_x = u * math.cos(theta) / denom
    expect_y = v / denom
    got = apply_homography(h, np.array([[u, v]], dtype=np.float64))[0]
    assert got[0] == pytest.approx(expect_x, abs=1e-9)
    assert got[1] == pytest.approx(expect_y, abs=1e-9)


def test_homography_inverse_roundtrip():
    h = yaw_homography(47.0, 64.0)
    pts = np.array([[-20.0, 13.0], [5.0, -9.0], [31.0, 30.0]])
    back = apply_homography(np.linalg.inv(h), apply_homography(h, pts))
    assert np.allclose(back, pts, atol=1e-10)


def test_warped_extent_covers_corners():
    w, h = 40, 66
    hom = yaw_homography(55.0, float(w))
    corners = np.array([
        [-w / 2.0, -h / 2.0], [w / 2.0, -h / 2.0],
        [-w / 2.0, h / 2.0], [w / 2.0, h / 2.0],
    ])
    mapped = apply_homography(hom, corners)
    ew, eh = warped_extent(55.0, w, h)
    assert ew >= mapped[:, 0].max() - mapped[:, 0].min() - 1e-9
    assert eh >= mapped[:, 1].max() - mapped[:, 1].min() - 1e-9


def test_perspective_warp_zero_angle_is_identity():
    img = torch.rand(3, 20, 16, generator=torch.Generator().manual_seed(3))
    assert perspective_warp(img, 0.0) is img


def test_perspective_warp_narrows_width():
    # alpha rides along as a fourth channel, as render_scene does it
    img = torch.cat([torch.ones(3, 30, 30), torch.ones(1, 30, 30)])
    out = perspective_warp(img, 60.0)
    cols = int((out[3] > 0.5).any(dim=0).sum())
    assert cols < 0.7 * 30


def test_perspective_warp_rejects_extreme_angle():
    with pytest.raises(InvalidInputError):
        perspective_warp(torch.ones(3, 10, 10), 86.0)


# ---------------------------------------------------------------------------
# photometric ops


def test_grayscale_zero_factor_is_identity():
    img = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(1))
    assert torch.equal(grayscale_transform(img, 0.0), img)


def test_grayscale_full_factor_equalizes_channels():
    img = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(2))
    out = grayscale_transform(img, 1.0)
    luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    for c in range(3):
        assert torch.allclose(out[c], luma, atol=1e-6)


def test_saturation_projection_red_fixture():
    img = torch.tensor([1.0, 0.0, 0.0]).reshape(3, 1, 1)
    out = project_saturation(img, 0.5)
    assert torch.allclose(out.flatten(), torch.tensor([1.0, 0.5, 0.5]), atol=1e-6)


def test_saturation_projection_is_idempotent():
    img = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(7))
    once = project_saturation(img, 0.4)
    twice = project_saturation(once, 0.4)
    assert torch.equal(once, twice)


def test_saturation_projection_passes_compliant_through():
    gray = torch.full((3, 4, 4), 0.3)
    assert project_saturation(gray, 0.2) is gray


@given(seed=st.integers(min_value=0, max_value=10_000),
       s_max=st.floats(min_value=0.05, max_value=0.95))
@settings(max_examples=40, deadline=None)
def test_saturation_bound_holds_everywhere(seed, s_max):
    img = torch.rand(3, 6, 6, generator=torch.Generator().manual_seed(seed))
    out = project_saturation(img, s_max)
    v, _ = out.max(dim=0)
    chroma = v - out.min(dim=0).values
    sat = torch.where(v > 0, chroma / v.clamp_min(1e-12), torch.zeros_like(v))
    assert float(sat.max()) <= s_max + 1e-6
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


# ---------------------------------------------------------------------------
# full renders


def test_neutral_render_reproduces_stored_frame(corpus):
    rec = target_record(corpus)
    spec = SceneSpec(rec.background_id, rec.target_box, 0.0, 1.0, 0.0, 0.0, seed=0)
    frame = render_scene(rec, corpus.target, None, spec)
    assert torch.equal(frame, rec.image)


def test_render_is_deterministic(corpus):
    rec = target_record(corpus)
    spec = SceneSpec(rec.background_id, rec.target_box, 35.0, 0.6, 0.3, 0.02, seed=11,
                     brightness=0.05)
    a = render_scene(rec, corpus.target, None, spec)
    b = render_scene(rec, corpus.target, None, spec)
    assert torch.equal(a, b)


def test_noise_depends_on_spec_seed(corpus):
    rec = target_record(corpus)
    base = dict(background_id=rec.background_id, placement_box=rec.target_box,
                view_angle=0.0, scale=1.0, grayscale_factor=0.0, noise_sigma=0.02)
    a = render_scene(rec, corpus.target, None, SceneSpec(seed=1, **base))
    b = render_scene(rec, corpus.target, None, SceneSpec(seed=2, **base))
    assert not torch.equal(a, b)


def test_render_values_stay_in_unit_range(corpus):
    rec = target_record(corpus)
    spec = SceneSpec(rec.background_id, rec.target_box, -50.0, 0.4, 0.5, 0.03, seed=3,
                     brightness=0.1)
    frame = render_scene(rec, corpus.target, None, spec)
    assert float(frame.min()) >= 0.0
    assert float(frame.max()) <= 1.0


def test_render_background_has_no_target(corpus):
    rec = target_record(corpus)
    spec = SceneSpec(rec.background_id, rec.target_box, 0.0, 1.0, 0.0, 0.0, seed=0)
    assert torch.equal(render_background(rec, spec), rec.plate)


def test_rendered_box_tracks_scale(corpus):
    rec = target_record(corpus)
    spec = SceneSpec(rec.background_id, rec.target_box, 0.0, 1.0, 0.0, 0.0, seed=0)
    assert rendered_target_box(rec, corpus.target, spec) == rec.target_box
    half = SceneSpec(rec.background_id, rec.target_box, 0.0, 0.5, 0.0, 0.0, seed=0)
    x0, y0, x1, y1 = rendered_target_box(rec, corpus.target, half)
    bx0, by0, bx1, by1 = rec.target_box
    assert (x1 - x0) <= (bx1 - bx0) / 2 + 2
    assert (y1 - y0) <= (by1 - by0) / 2 + 2
    cx, cy = placement_center(spec)
    assert x0 <= cx <= x1 and y0 <= cy <= y1


def test_gradient_reaches_patch_pixels(corpus, hide_patch_template):
    rec = target_record(corpus)
    spec = SceneSpec(rec.background_id, rec.target_box, 20.0, 0.8, 0.1, 0.0, seed=4)
    patch = hide_patch_template
    pixels = patch.pixels.clone().requires_grad_(True)
    frame = render_scene(rec, corpus.target, patch.with_pixels(pixels), spec)
    frame.sum().backward()
    inside = pixels.grad[:, patch.shape_mask > 0.5]
    outside = pixels.grad[:, patch.shape_mask < 0.5]
    assert float(inside.abs().sum()) > 0.0
    assert float(outside.abs().sum()) == 0.0


# ---------------------------------------------------------------------------
# sampling


def test_sample_batch_respects_ranges(corpus):
    ranges = VariationRanges(scale=(0.3, 0.6), angle=(-15.0, 15.0), grayscale=(0.1, 0.2),
                             noise=(0.005, 0.01), brightness=(-0.02, 0.02))
    specs = sample_scene_batch(corpus, 64, ranges, seed=9)
    assert len(specs) == 64
    for spec in specs:
        assert 0.3 <= spec.scale <= 0.6
        assert -15.0 <= spec.view_angle <= 15.0
        assert 0.1 <= spec.grayscale_factor <= 0.2
        assert 0.005 <= spec.noise_sigma <= 0.01
        assert -0.02 <= spec.brightness <= 0.02


def test_sample_batch_is_seed_deterministic(corpus):
    a = sample_scene_batch(corpus, 16, VariationRanges(), seed=5)
    b = sample_scene_batch(corpus, 16, VariationRanges(), seed=5)
    assert a == b
    c = sample_scene_batch(corpus, 16, VariationRanges(), seed=6)
    assert a != c


def test_sample_batch_footprint_sets_box_size(corpus):
    specs = sample_scene_batch(corpus, 32, VariationRanges(), seed=2, footprint=(44, 44))
    for spec in specs:
        rec = corpus.record(spec.background_id)
        if rec.target_box is None:
            x0, y0, x1, y1 = spec.placement_box
            assert (x1 - x0, y1 - y0) == (44, 44)


def test_sample_batch_rejects_empty_request(corpus):
    with pytest.raises(InvalidInputError):
        sample_scene_batch(corpus, 0, VariationRanges(), seed=0)
