"""Attack objectives over detector outputs and tapped features.

The hiding objective drives down the strongest target response while
steering hidden-layer features away from their clean values through an
inverse interference term. The appearing objective drives up the response of
the grid cell owning the patch center. Styling terms shape patch appearance
without changing the attack contract.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .detector import DetectorModel, FeatureTap, GridPredictions
from .errors import DegenerateGeometryWarning, InvalidInputError

# Keeps the inverse interference term finite when features collapse onto
# their clean values.
INTERFERENCE_EPS = 1e-6
# Keeps the color ratio finite on pixels where the favored channel is dark.
COLOR_EPS = 1e-3

_CHANNELS = {"R": 0, "G": 1, "B": 2}

Box = tuple[int, int, int, int]


@dataclass
class FeatureVector:
    """Channel-pooled, L2-normalized summary of one tapped region."""

    values: torch.Tensor
    normalized: bool = True
    degenerate: bool = False


@dataclass(frozen=True)
class HidingLossConfig:
    """Weights for the hiding objective.

    ``interference_weight`` of 0 disables the feature term entirely, which
    is the ablation baseline.
    """

    confidence_weight: float = 1.0
    prob_weight: float = 1.0
    interference_weight: float = 0.1
    target_class: int = 0
    tap_weights: dict[str, float] | None = None


@dataclass(frozen=True)
class AppearingLossConfig:
    prob_weight: float = 1.0
    target_class: int = 0


def _stacked(predictions) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(predictions, GridPredictions):
        return predictions.box_confidence, predictions.class_probs
    conf = torch.stack([p.box_confidence for p in predictions])
    probs = torch.stack([p.class_probs for p in predictions])
    return conf, probs


def feature_region_crop(tap: FeatureTap, object_box: Box) -> torch.Tensor:
    """Slice the tap rows/cols covering an input-space box.

    The box scales by the tap's spatial ratio with outward rounding. A span
    that collapses below one feature pixel is widened to one and flagged
    with a :class:`DegenerateGeometryWarning`.
    """
    x0, y0, x1, y1 = object_box
    if x0 >= x1 or y0 >= y1:
        raise InvalidInputError(f"degenerate object box {object_box}")
    _, fh, fw = tap.activations.shape
    ratio = tap.spatial_ratio
    r0 = max(0, min(fh - 1, math.floor(ratio * y0)))
    r1 = max(0, min(fh, math.ceil(ratio * y1)))
    c0 = max(0, min(fw - 1, math.floor(ratio * x0)))
    c1 = max(0, min(fw, math.ceil(ratio * x1)))
    if r1 <= r0 or c1 <= c0:
        warnings.warn(
            f"object box {object_box} spans less than one {tap.layer_id} feature pixel",
            DegenerateGeometryWarning, stacklevel=2)
        r1, c1 = r0 + 1, c0 + 1
    return tap.activations[:, r0:r1, c0:c1]


def mean_pool_features(region: torch.Tensor) -> FeatureVector:
    """Per-channel spatial mean, then L2 normalization.

    An all-zero region has no direction; it maps to the zero vector and is
    flagged degenerate rather than dividing by zero.
    """
    if region.ndim != 3:
        raise InvalidInputError(f"expected (C, h, w) region, got shape {tuple(region.shape)}")
    means = region.mean(dim=(1, 2))
    norm = torch.linalg.vector_norm(means)
    if float(norm.detach()) == 0.0:
        return FeatureVector(values=means, normalized=True, degenerate=True)
    return FeatureVector(values=means / norm, normalized=True)


def feature_interference(clean: FeatureVector, adversarial: FeatureVector) -> torch.Tensor:
    """Squared L2 distance between two pooled feature vectors."""
    if clean.values.shape != adversarial.values.shape:
        raise InvalidInputError(
            f"feature length mismatch: {tuple(clean.values.shape)} vs "
            f"{tuple(adversarial.values.shape)}")
    diff = adversarial.values - clean.values
    return (diff * diff).sum()


def interference_from_taps(taps_clean: Sequence[FeatureTap], taps_adv: Sequence[FeatureTap],
                           object_box: Box,
                           tap_weights: dict[str, float] | None = None) -> torch.Tensor:
    """Weighted sum of per-layer interference over the object region."""
    if len(taps_clean) != len(taps_adv):
        raise InvalidInputError("clean and adversarial tap lists differ in length")
    total = None
    for clean_tap, adv_tap in zip(taps_clean, taps_adv):
        if clean_tap.layer_id != adv_tap.layer_id:
            raise InvalidInputError(
                f"tap mismatch: {clean_tap.layer_id} vs {adv_tap.layer_id}")
        weight = 1.0 if tap_weights is None else tap_weights.get(clean_tap.layer_id, 0.0)
        if weight == 0.0:
            continue
        v_clean = mean_pool_features(feature_region_crop(clean_tap, object_box))
        v_adv = mean_pool_features(feature_region_crop(adv_tap, object_box))
        term = weight * feature_interference(v_clean, v_adv)
        total = term if total is None else total + term
    if total is None:
        raise InvalidInputError("no tap carried a non-zero weight")
    return total


@dataclass
class HidingLossTerms:
    """The three raw components before weighting."""

    box_confidence: torch.Tensor
    target_prob: torch.Tensor
    interference: torch.Tensor
    cell_index: int


def hiding_loss_terms(predictions, taps_clean: Sequence[FeatureTap],
                      taps_adv: Sequence[FeatureTap], config: HidingLossConfig,
                      object_box: Box) -> HidingLossTerms:
    conf, probs = _stacked(predictions)
    score = conf.detach() * probs.detach()[:, config.target_class]
    cell = int(score.argmax())
    interference = interference_from_taps(taps_clean, taps_adv, object_box, config.tap_weights)
    return HidingLossTerms(
        box_confidence=conf[cell],
        target_prob=probs[cell, config.target_class],
        interference=interference,
        cell_index=cell,
    )


def hiding_loss(predictions, taps_clean: Sequence[FeatureTap], taps_adv: Sequence[FeatureTap],
                config: HidingLossConfig, object_box: Box) -> torch.Tensor:
    """Objective whose descent suppresses the strongest target-class cell.

    The cell is chosen by the detached product of objectness and target
    probability; the feature term rewards pushing hidden activations away
    from their clean-scene values via an inverse penalty.
    """
    terms = hiding_loss_terms(predictions, taps_clean, taps_adv, config, object_box)
    loss = (config.confidence_weight * terms.box_confidence
            + config.prob_weight * terms.target_prob)
    if config.interference_weight != 0.0:
        loss = loss + config.interference_weight / (terms.interference + INTERFERENCE_EPS)
    return loss


def patch_cell_index(patch_size_px: float, patch_center: tuple[float, float],
                     grid: tuple[int, int], input_size: int) -> int:
    """Row-major index of the grid cell owning the patch center.

    ``patch_size_px`` is part of the placement contract because multi-grid
    detectors route objects to a grid by size; this single-grid setting uses
    only the center.
    """
    x, y = patch_center
    if not (0 <= x < input_size and 0 <= y < input_size):
        raise InvalidInputError(f"patch center ({x}, {y}) outside the {input_size} frame")
    if patch_size_px <= 0:
        raise InvalidInputError(f"patch size {patch_size_px} must be positive")
    m, n = grid
    row = min(m - 1, int(math.floor(y * m / input_size)))
    col = min(n - 1, int(math.floor(x * n / input_size)))
    return row * n + col


def appearing_loss(predictions, cell_index: int, config: AppearingLossConfig) -> torch.Tensor:
    """Objective whose descent makes the patch cell report the target class."""
    conf, probs = _stacked(predictions)
    if not 0 <= cell_index < conf.shape[0]:
        raise InvalidInputError(f"cell index {cell_index} outside 0..{conf.shape[0] - 1}")
    one_hot = torch.zeros_like(probs[cell_index])
    one_hot[config.target_class] = 1.0
    diff = probs[cell_index] - one_hot
    return (1.0 - conf[cell_index]) + config.prob_weight * (diff * diff).sum()


def pattern_loss(predictions, region_cells: Sequence[int], pattern_class: int) -> torch.Tensor:
    """Pull the named cells' probability for one class toward certainty."""
    if len(region_cells) == 0:
        raise InvalidInputError("pattern region contains no cells")
    _, probs = _stacked(predictions)
    if not 0 <= pattern_class < probs.shape[1]:
        raise InvalidInputError(f"pattern class {pattern_class} out of range")
    total = None
    for cell in region_cells:
        if not 0 <= cell < probs.shape[0]:
            raise InvalidInputError(f"cell index {cell} outside 0..{probs.shape[0] - 1}")
        term = (probs[cell, pattern_class] - 1.0) ** 2
        total = term if total is None else total + term
    return total


def color_loss(patch_pixels: torch.Tensor, channel: str) -> torch.Tensor:
    """Favor one color channel: total brightness over the favored channel.

    Minimal when the patch is dark everywhere except the favored channel;
    black pixels contribute zero.
    """
    if patch_pixels.ndim != 3 or patch_pixels.shape[0] != 3:
        raise InvalidInputError(f"expected (3, P, P) pixels, got shape {tuple(patch_pixels.shape)}")
    if channel not in _CHANNELS:
        raise InvalidInputError(f"channel must be one of {sorted(_CHANNELS)}, got {channel!r}")
    favored = patch_pixels[_CHANNELS[channel]]
    total = patch_pixels.sum(dim=0)
    return (total / (favored + COLOR_EPS)).sum()


# ---------------------------------------------------------------------------
# scalar loss adapters for input-space differentiation


@dataclass
class HidingLossSpec:
    """Callable (model, image) -> scalar for the hiding objective.

    Clean-scene taps are recomputed per call from ``clean_image`` without
    autograd, so gradients flow only through the adversarial image.
    """

    config: HidingLossConfig
    clean_image: torch.Tensor
    object_box: Box
    tap_layers: tuple[str, ...] | None = None

    def __call__(self, model: DetectorModel, image: torch.Tensor) -> torch.Tensor:
        predictions, taps_adv = model.predict(image, tap_layers=self.tap_layers)
        with torch.no_grad():
            _, taps_clean = model.predict(self.clean_image, tap_layers=self.tap_layers)
        return hiding_loss(predictions, taps_clean, taps_adv, self.config, self.object_box)


@dataclass
class AppearingLossSpec:
    config: AppearingLossConfig
    cell_index: int

    def __call__(self, model: DetectorModel, image: torch.Tensor) -> torch.Tensor:
        predictions, _ = model.predict(image, tap_layers=())
        return appearing_loss(predictions, self.cell_index, self.config)


@dataclass
class PatternLossSpec:
    region_cells: tuple[int, ...]
    pattern_class: int

    def __call__(self, model: DetectorModel, image: torch.Tensor) -> torch.Tensor:
        predictions, _ = model.predict(image, tap_layers=())
        return pattern_loss(predictions, self.region_cells, self.pattern_class)


@dataclass
class ColorLossSpec:
    """Color styling applied directly to the image argument (patch raster)."""

    channel: str

    def __call__(self, model: DetectorModel, image: torch.Tensor) -> torch.Tensor:
        return color_loss(image, self.channel)
