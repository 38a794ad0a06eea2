"""Attack evaluation: sweeps over distance, angle, and illumination.

Distance is proxied by render scale: the standard bins mirror a 5 m to 25 m
range for a sign whose native raster corresponds to the nearest distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attack import AttackConfig, AttackMode, Patch, poster_sprite, run_attack
from .corpus import SceneCorpus
from .detector import DetectorModel, is_detected
from .errors import InvalidInputError
from .losses import feature_interference, feature_region_crop, mean_pool_features
from .scene import (SceneSpec, VariationRanges, render_background, render_scene,
                    rendered_target_box, sample_scene_batch)

STANDARD_SCALE_BINS = (1.0, 0.5, 1.0 / 3.0, 0.25, 0.2)
STANDARD_ANGLE_BINS = (0.0, 30.0, 45.0, 60.0)


@dataclass(frozen=True)
class IlluminationPreset:
    """Named lighting condition expressed through the render controls."""

    name: str
    grayscale: float
    noise_sigma: float
    brightness: float


CLOUDY = IlluminationPreset("cloudy", grayscale=0.45, noise_sigma=0.015, brightness=-0.06)
SUNNY = IlluminationPreset("sunny", grayscale=0.12, noise_sigma=0.012, brightness=0.08)


@dataclass(frozen=True)
class SweepGrid:
    scale_bins: tuple[float, ...] = STANDARD_SCALE_BINS
    angle_bins: tuple[float, ...] = STANDARD_ANGLE_BINS
    illumination_bins: tuple[IlluminationPreset, ...] = (CLOUDY, SUNNY)
    frames_per_cell: int = 3

    def __post_init__(self):
        if not self.scale_bins or not self.angle_bins or not self.illumination_bins:
            raise InvalidInputError("sweep grid needs at least one bin per axis")
        if self.frames_per_cell < 1:
            raise InvalidInputError("frames_per_cell must be >= 1")

    @classmethod
    def standard(cls, frames_per_cell: int = 3) -> "SweepGrid":
        return cls(frames_per_cell=frames_per_cell)

    def cell_count(self) -> int:
        return len(self.scale_bins) * len(self.angle_bins) * len(self.illumination_bins)


class SuccessRule(str, Enum):
    """What counts as a success for one rendered frame."""

    DETECT = "detect"
    HIDE = "hide"
    APPEAR = "appear"


def success_rate(outcomes: Sequence[bool]) -> float:
    """Percentage of successful frames."""
    if len(outcomes) == 0:
        raise InvalidInputError("no outcomes to rate")
    return 100.0 * sum(bool(o) for o in outcomes) / len(outcomes)


@dataclass
class WindowedRates:
    """Sliding-window success rates; ``truncated`` marks a too-short sequence."""

    series: list[float]
    window: int
    best: float
    truncated: bool


def windowed_success(outcomes: Sequence[bool], window: int = 100) -> WindowedRates:
    """Success rate over every stride-1 window, and the best window."""
    if window < 1:
        raise InvalidInputError("window must be >= 1")
    n = len(outcomes)
    if n == 0:
        raise InvalidInputError("no outcomes to rate")
    flags = np.asarray([bool(o) for o in outcomes], dtype=np.float64)
    if n < window:
        rate = 100.0 * float(flags.mean())
        return WindowedRates(series=[rate], window=window, best=rate, truncated=True)
    kernel = np.ones(window) / window
    series = (100.0 * np.convolve(flags, kernel, mode="valid")).tolist()
    return WindowedRates(series=series, window=window, best=float(max(series)), truncated=False)


@dataclass
class CellResult:
    scale: float
    angle: float
    illumination: str
    rate: float
    frames: int


@dataclass
class EvalReport:
    rule: SuccessRule
    cells: list[CellResult]
    overall: float
    total_frames: int
    windowed: WindowedRates | None = None

    def rates_by(self, *, scale: float | None = None, angle: float | None = None,
                 illumination: str | None = None) -> list[CellResult]:
        out = []
        for cell in self.cells:
            if scale is not None and cell.scale != scale:
                continue
            if angle is not None and cell.angle != angle:
                continue
            if illumination is not None and cell.illumination != illumination:
                continue
            out.append(cell)
        return out

    def marginal(self, **what) -> float:
        """Frame-weighted success rate over the selected cells."""
        cells = self.rates_by(**what)
        if not cells:
            raise InvalidInputError(f"no sweep cells match {what}")
        frames = sum(c.frames for c in cells)
        return sum(c.rate * c.frames for c in cells) / frames

    def to_dict(self) -> dict:
        return {
            "rule": self.rule.value,
            "overall": self.overall,
            "total_frames": self.total_frames,
            "cells": [{
                "scale": c.scale, "angle": c.angle, "illumination": c.illumination,
                "rate": c.rate, "frames": c.frames,
            } for c in self.cells],
            "windowed_best": self.windowed.best if self.windowed else None,
            "windowed_truncated": self.windowed.truncated if self.windowed else None,
        }


def _frame_success(model: DetectorModel, corpus: SceneCorpus, patch: Patch | None,
                   spec: SceneSpec, rule: SuccessRule) -> bool:
    record = corpus.record(spec.background_id)
    if rule is SuccessRule.APPEAR:
        if patch is None:
            # nothing to appear: judge the bare background for false fires
            frame = render_background(record, spec)
        else:
            sprite = poster_sprite(patch.side, dtype=patch.pixels.dtype)
            frame = render_scene(record, sprite, patch, spec)
        predictions, _ = model.predict(frame, tap_layers=())
        return is_detected(predictions)
    frame = render_scene(record, corpus.target, patch, spec)
    predictions, _ = model.predict(frame, tap_layers=())
    detected = is_detected(predictions)
    return detected if rule is SuccessRule.DETECT else not detected


def run_sweep(model: DetectorModel, corpus: SceneCorpus, patch: Patch | None,
              grid: SweepGrid, rule: SuccessRule, seed: int = 0,
              window: int = 100) -> EvalReport:
    """Render and judge every sweep cell; deterministic for a fixed seed."""
    if patch is not None:
        footprint = (patch.side, patch.side) if rule is SuccessRule.APPEAR else None
    else:
        footprint = None
    rng = np.random.default_rng(seed)
    cells = []
    all_outcomes: list[bool] = []
    for scale in grid.scale_bins:
        for angle in grid.angle_bins:
            for preset in grid.illumination_bins:
                ranges = VariationRanges(
                    scale=(scale, scale),
                    angle=(angle, angle),
                    grayscale=(preset.grayscale, preset.grayscale),
                    noise=(preset.noise_sigma, preset.noise_sigma),
                    brightness=(preset.brightness, preset.brightness),
                )
                specs = sample_scene_batch(corpus, grid.frames_per_cell, ranges,
                                           seed=int(rng.integers(2**31)), footprint=footprint)
                outcomes = [_frame_success(model, corpus, patch, spec, rule) for spec in specs]
                all_outcomes.extend(outcomes)
                cells.append(CellResult(scale=scale, angle=angle, illumination=preset.name,
                                        rate=success_rate(outcomes), frames=len(outcomes)))
    return EvalReport(
        rule=rule,
        cells=cells,
        overall=success_rate(all_outcomes),
        total_frames=len(all_outcomes),
        windowed=windowed_success(all_outcomes, window=window),
    )


# ---------------------------------------------------------------------------
# feature interference over training checkpoints


@dataclass
class InterferenceHeatmap:
    """Per-layer, per-checkpoint interference, channel-normalized.

    ``matrix[l, k]`` is the squared distance between clean and adversarial
    pooled features at layer ``l`` for checkpoint ``k``, divided by the
    layer's channel count so layers of different width are comparable. An
    unperturbed checkpoint (``None`` pixels, conventionally first with
    iteration label -1) yields an identically zero column.
    """

    matrix: np.ndarray
    layer_ids: tuple[str, ...]
    iterations: tuple[int, ...]


def interference_heatmap(model: DetectorModel, corpus: SceneCorpus, template: Patch,
                         checkpoints: Sequence[tuple[int, torch.Tensor | None]],
                         spec: SceneSpec) -> InterferenceHeatmap:
    """Interference of every conv layer for each patch checkpoint on one scene.

    Internally computed in float64 so entries can be checked against a
    scripted recomputation at tight tolerance.
    """
    if not checkpoints:
        raise InvalidInputError("no checkpoints to analyze")
    record = corpus.record(spec.background_id)
    if template.mode is AttackMode.HIDE:
        sprite = corpus.target
    else:
        sprite = poster_sprite(template.side, dtype=template.pixels.dtype)
    layer_ids = tuple(getattr(model, "conv_layer_ids", model.tap_layer_ids))
    box = rendered_target_box(record, sprite, spec)
    with torch.no_grad():
        clean = render_scene(record, sprite, None, spec)
        _, taps_clean = model.predict(clean, tap_layers=layer_ids)
        clean_vectors = [
            mean_pool_features(feature_region_crop(tap, box).double()) for tap in taps_clean
        ]
        matrix = np.zeros((len(layer_ids), len(checkpoints)), dtype=np.float64)
        for k, (_, pixels) in enumerate(checkpoints):
            patch = None if pixels is None else template.with_pixels(pixels)
            adv = render_scene(record, sprite, patch, spec)
            _, taps_adv = model.predict(adv, tap_layers=layer_ids)
            for l, tap in enumerate(taps_adv):
                vec = mean_pool_features(feature_region_crop(tap, box).double())
                channels = tap.activations.shape[0]
                matrix[l, k] = float(feature_interference(clean_vectors[l], vec)) / channels
    return InterferenceHeatmap(
        matrix=matrix,
        layer_ids=layer_ids,
        iterations=tuple(it for it, _ in checkpoints),
    )


def save_heatmap_png(heatmap: InterferenceHeatmap, path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.2 + 0.45 * len(heatmap.iterations),
                                    1.0 + 0.35 * len(heatmap.layer_ids)))
    im = ax.imshow(heatmap.matrix, aspect="auto", cmap="magma")
    ax.set_xticks(range(len(heatmap.iterations)),
                  [str(it) for it in heatmap.iterations], rotation=45)
    ax.set_yticks(range(len(heatmap.layer_ids)), heatmap.layer_ids)
    ax.set_xlabel("attack iteration")
    ax.set_ylabel("layer")
    fig.colorbar(im, ax=ax, label="interference / channel")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# patch area sensitivity


@dataclass
class RatioPoint:
    ratio: float
    rate: float
    trials: int


@dataclass
class AreaRatioCurve:
    points: list[RatioPoint]

    def rate_at(self, ratio: float) -> float:
        for point in self.points:
            if abs(point.ratio - ratio) < 1e-9:
                return point.rate
        raise InvalidInputError(f"no curve point at ratio {ratio}")

    def monotone_fit(self) -> dict:
        """Isotonic (non-decreasing) least-squares fit of rate against ratio.

        Strict monotonicity of the raw rates is never asserted; the residuals
        only diagnose how far the sampled curve strays from a rising one.
        """
        ordered = sorted(self.points, key=lambda p: p.ratio)
        fitted = _pool_adjacent_violators([p.rate for p in ordered])
        residuals = [f - p.rate for f, p in zip(fitted, ordered)]
        return {
            "ratios": [p.ratio for p in ordered],
            "fitted": fitted,
            "max_abs_residual": max(abs(r) for r in residuals),
        }


def _pool_adjacent_violators(values: Sequence[float]) -> list[float]:
    blocks: list[list[float]] = []
    for v in values:
        blocks.append([float(v), 1.0])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2 = blocks.pop()
            m1, w1 = blocks.pop()
            blocks.append([(m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2])
    fitted: list[float] = []
    for mean, weight in blocks:
        fitted.extend([mean] * int(weight))
    return fitted


def area_ratio_curve(model: DetectorModel, corpus: SceneCorpus, ratios: Sequence[float],
                     attack_config: AttackConfig, trials_per_ratio: int = 1000,
                     seed: int = 0) -> AreaRatioCurve:
    """Hiding success as a function of patch area budget.

    Runs one (typically shortened) hiding attack per ratio and scores it on
    randomly transformed scenes.
    """
    if attack_config.mode is not AttackMode.HIDE:
        raise InvalidInputError("area sensitivity is defined for hiding attacks")
    if trials_per_ratio < 1:
        raise InvalidInputError("trials_per_ratio must be >= 1")
    rng = np.random.default_rng(seed)
    points = []
    for ratio in ratios:
        if not 0.0 < ratio < 1.0:
            raise InvalidInputError(f"area ratio {ratio} outside (0, 1)")
        cfg = replace(attack_config, patch_ratio=ratio, seed=int(rng.integers(2**31)))
        patch, _ = run_attack(model, corpus, cfg)
        specs = sample_scene_batch(corpus, trials_per_ratio, cfg.ranges,
                                   seed=int(rng.integers(2**31)))
        outcomes = [
            _frame_success(model, corpus, patch, spec, SuccessRule.HIDE) for spec in specs
        ]
        points.append(RatioPoint(ratio=ratio, rate=success_rate(outcomes),
                                 trials=trials_per_ratio))
    return AreaRatioCurve(points=points)


def save_curve_png(curve: AreaRatioCurve, path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([p.ratio for p in curve.points], [p.rate for p in curve.points], marker="o")
    ax.set_xlabel("patch area / sign area")
    ax.set_ylabel("hiding success (%)")
    ax.set_ylim(-2, 102)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
