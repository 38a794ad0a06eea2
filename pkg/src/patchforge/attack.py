"""Iterative sign-step patch optimization over batches of scene variations.

Two modes: HIDE suppresses detection of a sign the patch is attached to,
APPEAR makes a standalone poster be detected as the target class. Each
iteration renders a batch of randomized scenes, averages the per-scene
pixel gradients, and takes a fixed-size signed step restricted to the patch
mask, followed by a clip to [0, 1] and a printability-motivated saturation
projection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from . import images, masks
from .corpus import SceneCorpus, TargetSprite
from .detector import DetectorModel, is_detected
from .errors import InvalidInputError, NonFiniteLossError
from .losses import (
    AppearingLossConfig,
    HidingLossConfig,
    appearing_loss,
    color_loss,
    hiding_loss_terms,
    patch_cell_index,
    pattern_loss,
)
from .scene import (
    SceneSpec,
    VariationRanges,
    placement_center,
    project_saturation,
    render_scene,
    rendered_target_box,
    sample_scene_batch,
)


class AttackMode(str, Enum):
    HIDE = "hide"
    APPEAR = "appear"


@dataclass
class Patch:
    """A square pixel raster with its shape and center masks.

    ``shape_mask`` selects the pixels the attack may change; pixels outside
    it keep their initialization forever. ``center_mask`` is the subset
    updated when the rendered patch is large.
    """

    pixels: torch.Tensor
    shape_mask: torch.Tensor
    center_mask: torch.Tensor
    mode: AttackMode

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != 3 or p.shape[1] != p.shape[2]:
            raise InvalidInputError(f"pixels must be (3, P, P), got {tuple(p.shape)}")
        for name in ("shape_mask", "center_mask"):
            m = getattr(self, name)
            if m.shape != p.shape[1:]:
                raise InvalidInputError(f"{name} shape {tuple(m.shape)} does not match pixels")
            if not bool(((m == 0.0) | (m == 1.0)).all()):
                raise InvalidInputError(f"{name} must be binary")
        if bool(((self.center_mask > 0.5) & (self.shape_mask < 0.5)).any()):
            raise InvalidInputError("center_mask must be a subset of shape_mask")
        lo, hi = float(p.detach().min()), float(p.detach().max())
        if lo < 0.0 or hi > 1.0:
            raise InvalidInputError(f"pixel values [{lo:.4g}, {hi:.4g}] leave [0, 1]")

    @property
    def side(self) -> int:
        return int(self.pixels.shape[1])

    def with_pixels(self, pixels: torch.Tensor) -> "Patch":
        return Patch(pixels, self.shape_mask, self.center_mask, self.mode)


@dataclass(frozen=True)
class StyleConfig:
    """Optional appearance shaping for hiding patches."""

    shape: str = "strips"
    letter: str = "P"
    pattern_class: int | None = None
    pattern_weight: float = 0.0
    color_channel: str | None = None
    color_weight: float = 0.0

    def __post_init__(self):
        if self.shape not in ("strips", "letter", "full"):
            raise InvalidInputError(f"unknown patch shape {self.shape!r}")
        if self.pattern_weight < 0.0 or self.color_weight < 0.0:
            raise InvalidInputError("style weights must be non-negative")


@dataclass(frozen=True)
class AttackConfig:
    mode: AttackMode = AttackMode.HIDE
    iterations: int = 500
    batch_size: int = 8
    epsilon: float = 2.0 / 255.0
    patch_ratio: float = 0.22
    poster_side: int = 44
    size_threshold: float | None = None
    center_fraction: float = 1.0 / 3.0
    nested: bool = True
    saturation_max: float = 0.8
    momentum: float = 0.0
    hiding: HidingLossConfig = field(default_factory=HidingLossConfig)
    appearing: AppearingLossConfig = field(default_factory=AppearingLossConfig)
    style: StyleConfig | None = None
    ranges: VariationRanges = field(default_factory=lambda: VariationRanges(
        brightness=(-0.1, 0.1)))
    seed: int = 0
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.epsilon <= 0.0:
            raise InvalidInputError("epsilon must be positive")
        if not 0.0 < self.patch_ratio < 1.0:
            raise InvalidInputError("patch_ratio must be in (0, 1)")
        if self.poster_side < 8:
            raise InvalidInputError("poster_side below 8 pixels")
        if not 0.0 < self.center_fraction < 1.0:
            raise InvalidInputError("center_fraction must be in (0, 1)")
        if not 0.0 < self.saturation_max <= 1.0:
            raise InvalidInputError("saturation_max must be in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must be in [0, 1)")
        if self.checkpoint_every < 1:
            raise InvalidInputError("checkpoint_every must be >= 1")

    def resolved_for(self, model: DetectorModel) -> "AttackConfig":
        """Pin the size threshold to a quarter of the detector input if unset."""
        if self.size_threshold is not None:
            return self
        return replace(self, size_threshold=0.25 * model.input_size)


def poster_sprite(side: int, dtype: torch.dtype = torch.float32) -> TargetSprite:
    """A standalone square poster the appearing patch fully covers."""
    return TargetSprite(
        image=torch.zeros((3, side, side), dtype=dtype),
        alpha=torch.ones((side, side), dtype=dtype),
        patch_box=(0, 0, side, side),
        class_id=0,
        object_area=side * side,
        face_mask=torch.ones((side, side), dtype=dtype),
        legend_rows=(0, 0),
    )


def init_patch(config: AttackConfig, corpus: SceneCorpus) -> Patch:
    """Seeded uniform-noise patch with masks derived from mode and style."""
    style = config.style or StyleConfig()
    if config.mode is AttackMode.HIDE:
        target = corpus.target
        x0, y0, x1, y1 = target.patch_box
        side = x1 - x0
        allowed = target.face_mask[y0:y1, x0:x1].clone()
        r0, r1 = target.legend_rows
        allowed[r0:r1] = 0.0
        if style.shape == "letter":
            shape = masks.letter_mask(side, style.letter) * allowed
            if not bool(shape.any()):
                raise InvalidInputError("letter mask does not intersect the sign face")
        elif style.shape == "full":
            shape = allowed
        else:
            count = int(round(config.patch_ratio * target.object_area))
            shape = masks.fill_rows_outward(allowed, target.legend_rows, count)
        center = torch.zeros_like(shape)
    else:
        side = config.poster_side
        shape = torch.ones((side, side), dtype=torch.float32)
        center = masks.center_square_mask(side, config.center_fraction)
    gen = torch.Generator().manual_seed(config.seed)
    pixels = torch.rand((3, side, side), generator=gen)
    pixels = project_saturation(pixels, config.saturation_max)
    return Patch(pixels=pixels, shape_mask=shape, center_mask=center, mode=config.mode)


def _apply_update(patch: Patch, step_sign: torch.Tensor, mask: torch.Tensor,
                  epsilon: float, saturation_max: float) -> Patch:
    if step_sign.shape != patch.pixels.shape:
        raise InvalidInputError(
            f"step sign shape {tuple(step_sign.shape)} does not match pixels")
    stepped = (patch.pixels + epsilon * step_sign).clamp(0.0, 1.0)
    projected = project_saturation(stepped, saturation_max)
    new_pixels = torch.where(mask.unsqueeze(0) > 0.5, projected, patch.pixels)
    return patch.with_pixels(new_pixels)


def masked_update(patch: Patch, step_sign: torch.Tensor, config: AttackConfig) -> Patch:
    """Signed step on every shape-mask pixel, then clip and saturation projection."""
    return _apply_update(patch, step_sign, patch.shape_mask, config.epsilon,
                         config.saturation_max)


def nested_update(patch: Patch, step_sign: torch.Tensor, rendered_size: float,
                  config: AttackConfig) -> Patch:
    """Size-conditioned step: full mask when the rendered patch is small,
    center-only when it is large.

    ``rendered_size`` is the patch's on-scene side in pixels; the switch
    point is ``config.size_threshold``, which must be resolved.
    """
    if config.size_threshold is None:
        raise InvalidInputError("size_threshold unresolved; call config.resolved_for(model)")
    if rendered_size > config.size_threshold:
        mask = patch.shape_mask * patch.center_mask
    else:
        mask = patch.shape_mask
    return _apply_update(patch, step_sign, mask, config.epsilon, config.saturation_max)


# ---------------------------------------------------------------------------
# gradients over scene batches


@dataclass
class BatchStats:
    loss: float
    interference: float | None
    detections: int
    variation_losses: list[float]


def _cells_under_box(box, grid, input_size) -> tuple[int, ...]:
    x0, y0, x1, y1 = box
    m, n = grid
    r0 = max(0, min(m - 1, int(math.floor(y0 * m / input_size))))
    r1 = max(r0, min(m - 1, int(math.ceil(y1 * m / input_size)) - 1))
    c0 = max(0, min(n - 1, int(math.floor(x0 * n / input_size))))
    c1 = max(c0, min(n - 1, int(math.ceil(x1 * n / input_size)) - 1))
    return tuple(r * n + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1))


def _variation_loss(model: DetectorModel, corpus: SceneCorpus, patch: Patch,
                    spec: SceneSpec, config: AttackConfig) -> tuple[torch.Tensor, dict]:
    record = corpus.record(spec.background_id)
    style = config.style
    if config.mode is AttackMode.HIDE:
        target = corpus.target
        tap_layers = None
        if config.hiding.tap_weights is not None:
            tap_layers = tuple(sorted(config.hiding.tap_weights))
        adv = render_scene(record, target, patch, spec)
        with torch.no_grad():
            clean = render_scene(record, target, None, spec)
        box = rendered_target_box(record, target, spec)
        predictions, taps_adv = model.predict(adv, tap_layers=tap_layers)
        with torch.no_grad():
            _, taps_clean = model.predict(clean, tap_layers=tap_layers)
        terms = hiding_loss_terms(predictions, taps_clean, taps_adv, config.hiding, box)
        loss = (config.hiding.confidence_weight * terms.box_confidence
                + config.hiding.prob_weight * terms.target_prob)
        if config.hiding.interference_weight != 0.0:
            from .losses import INTERFERENCE_EPS
            loss = loss + config.hiding.interference_weight / (terms.interference + INTERFERENCE_EPS)
        if style is not None and style.pattern_weight > 0.0 and style.pattern_class is not None:
            cells = _cells_under_box(box, model.grid, model.input_size)
            loss = loss + style.pattern_weight * pattern_loss(predictions, cells, style.pattern_class)
        if style is not None and style.color_weight > 0.0 and style.color_channel is not None:
            loss = loss + style.color_weight * color_loss(patch.pixels, style.color_channel)
        info = {
            "interference": float(terms.interference.detach()),
            "detected": is_detected(predictions, config.hiding.target_class),
        }
        return loss, info

    sprite = poster_sprite(config.poster_side, dtype=patch.pixels.dtype)
    adv = render_scene(record, sprite, patch, spec)
    cell = patch_cell_index(config.poster_side * spec.scale, placement_center(spec),
                            model.grid, model.input_size)
    predictions, _ = model.predict(adv, tap_layers=())
    loss = appearing_loss(predictions, cell, config.appearing)
    info = {
        "interference": None,
        "detected": is_detected(predictions, config.appearing.target_class),
    }
    return loss, info


def batch_variation_gradient(model: DetectorModel, corpus: SceneCorpus, patch: Patch,
                             scene_batch: list[SceneSpec],
                             config: AttackConfig) -> tuple[torch.Tensor, BatchStats]:
    """Mean of the per-variation pixel gradients, one rendered scene each.

    The mean of single-variation gradients equals this function's output by
    construction; every variation contributes through its own render and
    backward pass.
    """
    if not scene_batch:
        raise InvalidInputError("scene batch is empty")
    pixels = patch.pixels.detach().clone().requires_grad_(True)
    live = patch.with_pixels(pixels)
    grads = []
    losses = []
    interferences = []
    detections = 0
    for spec in scene_batch:
        loss, info = _variation_loss(model, corpus, live, spec, config)
        grads.append(torch.autograd.grad(loss, pixels)[0])
        losses.append(float(loss.detach()))
        if info["interference"] is not None:
            interferences.append(info["interference"])
        detections += int(info["detected"])
    grad = torch.stack(grads).mean(dim=0)
    stats = BatchStats(
        loss=float(np.mean(losses)),
        interference=float(np.mean(interferences)) if interferences else None,
        detections=detections,
        variation_losses=losses,
    )
    return grad, stats


# ---------------------------------------------------------------------------
# the optimization loop


@dataclass
class TraceRow:
    iteration: int
    loss: float
    interference: float | None
    batch_detections: int
    rendered_size: float | None


@dataclass
class AttackTrace:
    rows: list[TraceRow] = field(default_factory=list)
    checkpoints: list[tuple[int, torch.Tensor]] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [row.loss for row in self.rows]


def run_attack(model: DetectorModel, corpus: SceneCorpus,
               config: AttackConfig) -> tuple[Patch, AttackTrace]:
    """Optimize a patch for ``config.iterations`` steps.

    Fully deterministic for a fixed (model weights, corpus, config) triple.
    Raises :class:`NonFiniteLossError` with the current patch attached when
    the batch loss stops being finite.
    """
    config = config.resolved_for(model)
    patch = init_patch(config, corpus)
    trace = AttackTrace()
    if config.iterations == 0:
        return patch, trace
    trace.checkpoints.append((0, patch.pixels.clone()))
    rng = np.random.default_rng(config.seed)
    velocity = torch.zeros_like(patch.pixels)
    if config.mode is AttackMode.HIDE:
        footprint = (corpus.target.width, corpus.target.height)
    else:
        footprint = (config.poster_side, config.poster_side)

    for iteration in range(1, config.iterations + 1):
        if config.mode is AttackMode.APPEAR:
            scale = float(rng.uniform(*config.ranges.scale))
            it_ranges = config.ranges.pinned(scale=scale)
            rendered_size = scale * config.poster_side
        else:
            it_ranges = config.ranges
            rendered_size = None
        batch = sample_scene_batch(corpus, config.batch_size, it_ranges,
                                   seed=int(rng.integers(2**31)), footprint=footprint)
        grad, stats = batch_variation_gradient(model, corpus, patch, batch, config)
        if not math.isfinite(stats.loss):
            raise NonFiniteLossError(iteration, stats.loss, diagnostic={
                "patch_pixels": patch.pixels.clone(),
                "variation_losses": stats.variation_losses,
                "scene_batch": batch,
            })
        velocity = config.momentum * velocity + grad
        step = -torch.sign(velocity)
        if config.mode is AttackMode.APPEAR and config.nested:
            patch = nested_update(patch, step, rendered_size, config)
        else:
            patch = masked_update(patch, step, config)
        trace.rows.append(TraceRow(iteration, stats.loss, stats.interference,
                                   stats.detections, rendered_size))
        if iteration % config.checkpoint_every == 0 or iteration == config.iterations:
            if trace.checkpoints[-1][0] != iteration:
                trace.checkpoints.append((iteration, patch.pixels.clone()))
    return patch, trace


# ---------------------------------------------------------------------------
# persistence


def save_patch(patch: Patch, out_dir: str | Path, stem: str = "patch",
               meta: dict | None = None) -> Path:
    """Write the float raster (authoritative), masks, a PNG preview, and a sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / f"{stem}.npy", patch.pixels.detach().cpu().to(torch.float32).numpy())
    np.savez(out / f"{stem}_masks.npz",
             shape=patch.shape_mask.cpu().numpy().astype(np.uint8),
             center=patch.center_mask.cpu().numpy().astype(np.uint8))
    preview = torch.cat([
        patch.pixels.detach().cpu().float() * patch.shape_mask.cpu(),
        patch.shape_mask.cpu().unsqueeze(0),
    ])
    images.save_png(preview, out / f"{stem}.png")
    sidecar = {"mode": patch.mode.value, "side": patch.side, **(meta or {})}
    (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return out / f"{stem}.npy"


def load_patch(out_dir: str | Path, stem: str = "patch") -> Patch:
    out = Path(out_dir)
    sidecar = json.loads((out / f"{stem}.json").read_text())
    pixels = torch.from_numpy(np.load(out / f"{stem}.npy"))
    mask_blob = np.load(out / f"{stem}_masks.npz")
    return Patch(
        pixels=pixels,
        shape_mask=torch.from_numpy(mask_blob["shape"]).float(),
        center_mask=torch.from_numpy(mask_blob["center"]).float(),
        mode=AttackMode(sidecar["mode"]),
    )


def save_trace(trace: AttackTrace, out_dir: str | Path, stem: str = "trace") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{
        "iteration": r.iteration,
        "loss": r.loss,
        "interference": r.interference,
        "batch_detections": r.batch_detections,
        "rendered_size": r.rendered_size,
    } for r in trace.rows]
    (out / f"{stem}.json").write_text(json.dumps(rows, indent=2))
    arrays = {f"it{it:06d}": px.cpu().to(torch.float32).numpy() for it, px in trace.checkpoints}
    np.savez(out / f"{stem}_checkpoints.npz", **arrays)


def load_trace_checkpoints(out_dir: str | Path, stem: str = "trace") -> list[tuple[int, torch.Tensor]]:
    blob = np.load(Path(out_dir) / f"{stem}_checkpoints.npz")
    out = []
    for key in sorted(blob.files):
        out.append((int(key[2:]), torch.from_numpy(blob[key])))
    return out


def load_trace(out_dir: str | Path, stem: str = "trace") -> AttackTrace:
    rows = [
        TraceRow(r["iteration"], r["loss"], r["interference"],
                 r["batch_detections"], r["rendered_size"])
        for r in json.loads((Path(out_dir) / f"{stem}.json").read_text())
    ]
    return AttackTrace(rows=rows, checkpoints=load_trace_checkpoints(out_dir, stem))
