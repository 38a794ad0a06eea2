"""Differentiable scene synthesis.

A scene is produced from a background record, a target sprite, and an
optional patch by a fixed pipeline: attach the patch to the sprite, rescale,
perspective-warp, apply a grayscale shift, composite over the background,
then add brightness, sensor noise, and a final clamp to [0, 1]. Every stage
before the noise is differentiable with respect to patch pixels, and every
stage at its neutral setting is an exact identity.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import BackgroundKind, BackgroundRecord, SceneCorpus, TargetSprite
from .errors import DegenerateGeometryWarning, EmptyCorpusError, InvalidInputError

if TYPE_CHECKING:
    from .attack import Patch

FOCAL_RATIO = 2.0
MAX_WARP_ANGLE = 85.0
MAX_SCENE_ANGLE = 60.0

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

Box = tuple[int, int, int, int]


@dataclass(frozen=True)
class SceneSpec:
    """One fully determined rendering: background, placement, and transform levels."""

    background_id: str
    placement_box: Box
    view_angle: float
    scale: float
    grayscale_factor: float
    noise_sigma: float
    seed: int
    brightness: float = 0.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.placement_box
        if x0 >= x1 or y0 >= y1:
            raise InvalidInputError(f"degenerate placement box {self.placement_box}")
        if abs(self.view_angle) > MAX_SCENE_ANGLE:
            raise InvalidInputError(f"view angle {self.view_angle} outside [-60, 60] degrees")
        if not 0.0 < self.scale <= 1.0:
            raise InvalidInputError(f"scale {self.scale} outside (0, 1]")
        if not 0.0 <= self.grayscale_factor <= 1.0:
            raise InvalidInputError(f"grayscale factor {self.grayscale_factor} outside [0, 1]")
        if self.noise_sigma < 0.0:
            raise InvalidInputError(f"negative noise sigma {self.noise_sigma}")
        if abs(self.brightness) > 1.0:
            raise InvalidInputError(f"brightness offset {self.brightness} outside [-1, 1]")


@dataclass(frozen=True)
class VariationRanges:
    """Uniform sampling ranges for the random scene transforms."""

    scale: tuple[float, float] = (0.2, 1.0)
    angle: tuple[float, float] = (-60.0, 60.0)
    grayscale: tuple[float, float] = (0.0, 0.6)
    noise: tuple[float, float] = (0.0, 0.03)
    brightness: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for name in ("scale", "angle", "grayscale", "noise", "brightness"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidInputError(f"{name} range ({lo}, {hi}) has lo > hi")

    def pinned(self, **levels: float) -> "VariationRanges":
        """Collapse the named ranges to a single value each."""
        return replace(self, **{k: (v, v) for k, v in levels.items()})


def estimate_view_angle(width: float, height: float) -> float:
    """Viewing angle in degrees recovered from an observed bounding box.

    A fronto-parallel sign appears with its native aspect; yaw shrinks the
    apparent width, so the angle is ``acos(width / height)`` for a nominally
    square face. Boxes wider than tall fall outside the model and clamp to 0.
    """
    if width <= 0 or height <= 0:
        raise InvalidInputError(f"box sides must be positive, got {width}x{height}")
    ratio = width / height
    if ratio > 1.0:
        warnings.warn(
            f"box wider than tall (ratio {ratio:.3f}); clamping view angle to 0",
            DegenerateGeometryWarning, stacklevel=2)
        ratio = 1.0
    return math.degrees(math.acos(ratio))


def yaw_homography(angle_deg: float, width: float, focal_ratio: float = FOCAL_RATIO) -> np.ndarray:
    """3x3 map from centered plane coordinates to centered image coordinates.

    Models a plane of the given pixel width rotated by ``angle_deg`` about a
    vertical axis through its center, viewed by a pinhole camera at distance
    ``focal_ratio * width``.
    """
    theta = math.radians(angle_deg)
    d = focal_ratio * width
    return np.array([
        [math.cos(theta), 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [-math.sin(theta) / d, 0.0, 1.0],
    ], dtype=np.float64)


def apply_homography(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to an (N, 2) array of points."""
    pts = np.asarray(points, dtype=np.float64)
    ones = np.ones((pts.shape[0], 1))
    mapped = np.concatenate([pts, ones], axis=1) @ matrix.T
    return mapped[:, :2] / mapped[:, 2:3]


def warped_extent(angle_deg: float, width: float, height: float,
                  focal_ratio: float = FOCAL_RATIO) -> tuple[float, float]:
    """Half-width and half-height of the warped footprint of a centered w x h plane."""
    matrix = yaw_homography(angle_deg, width, focal_ratio)
    hw, hh = width / 2.0, height / 2.0
    corners = np.array([(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)])
    mapped = apply_homography(matrix, corners)
    return float(np.abs(mapped[:, 0]).max()), float(np.abs(mapped[:, 1]).max())


def perspective_warp(image: torch.Tensor, angle_deg: float,
                     focal_ratio: float = FOCAL_RATIO) -> torch.Tensor:
    """Same-size bilinear resampling of an image under the yaw homography.

    Pixels mapping outside the source quad come back zero; callers that need
    coverage tracking pass an image with an alpha plane. An angle of exactly
    0 returns the input untouched.
    """
    if image.ndim != 3:
        raise InvalidInputError(f"expected (C, H, W), got shape {tuple(image.shape)}")
    if abs(angle_deg) > MAX_WARP_ANGLE:
        raise InvalidInputError(f"view angle {angle_deg} exceeds {MAX_WARP_ANGLE} degrees")
    if angle_deg == 0.0:
        return image
    _, h, w = image.shape
    inverse = np.linalg.inv(yaw_homography(angle_deg, w, focal_ratio))
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    pts = np.stack([xs.ravel() - (w - 1) / 2.0, ys.ravel() - (h - 1) / 2.0], axis=1)
    src = apply_homography(inverse, pts)
    norm_x = 2.0 * (src[:, 0] + (w - 1) / 2.0) / (w - 1) - 1.0
    norm_y = 2.0 * (src[:, 1] + (h - 1) / 2.0) / (h - 1) - 1.0
    grid = torch.from_numpy(
        np.stack([norm_x, norm_y], axis=1).reshape(1, h, w, 2)).to(image.dtype)
    out = F.grid_sample(image.unsqueeze(0), grid, mode="bilinear",
                        padding_mode="zeros", align_corners=True)
    return out[0]


def grayscale_transform(image: torch.Tensor, factor: float) -> torch.Tensor:
    """Blend an RGB image toward its luminance; factor 0 is identity, 1 full gray."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise InvalidInputError(f"expected (3, H, W), got shape {tuple(image.shape)}")
    if not 0.0 <= factor <= 1.0:
        raise InvalidInputError(f"grayscale factor {factor} outside [0, 1]")
    r, g, b = LUMA_WEIGHTS
    luma = r * image[0] + g * image[1] + b * image[2]
    return (1.0 - factor) * image + factor * luma.unsqueeze(0)


# Relative slack on the saturation trigger: pixels within this factor of the
# bound are treated as already compliant, which makes the projection exactly
# idempotent despite floating-point rounding of the scaled chroma.
_SATURATION_SLACK = 5e-7


def project_saturation(pixels: torch.Tensor, s_max: float) -> torch.Tensor:
    """Pull each pixel's HSV saturation down to at most ``s_max``.

    Value (max channel) and hue are preserved; the two lower channels move
    toward the max until ``(max - min) / max <= s_max``. Compliant pixels,
    including pure black, pass through bitwise unchanged, so the projection
    is idempotent.
    """
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise InvalidInputError(f"expected (3, H, W), got shape {tuple(pixels.shape)}")
    if not 0.0 < s_max <= 1.0:
        raise InvalidInputError(f"s_max {s_max} outside (0, 1]")
    x = pixels.to(torch.float64)
    value = x.max(dim=0).values
    chroma = value - x.min(dim=0).values
    limit = s_max * value
    trigger = chroma > limit * (1.0 + _SATURATION_SLACK)
    if not bool(trigger.any()):
        return pixels
    k = torch.where(trigger, limit / chroma.clamp_min(1e-300), torch.ones_like(chroma))
    projected = value.unsqueeze(0) - (value.unsqueeze(0) - x) * k.unsqueeze(0)
    out = torch.where(trigger.unsqueeze(0).expand_as(x), projected, x)
    return out.to(pixels.dtype)


# ---------------------------------------------------------------------------
# rendering


def _rescale(image: torch.Tensor, scale: float) -> torch.Tensor:
    if scale == 1.0:
        return image
    _, h, w = image.shape
    h2 = max(1, round(h * scale))
    w2 = max(1, round(w * scale))
    if min(h * scale, w * scale) < 1.0:
        warnings.warn(f"scale {scale} collapses a {w}x{h} raster below one pixel",
                      DegenerateGeometryWarning, stacklevel=3)
    return F.interpolate(image.unsqueeze(0), size=(h2, w2), mode="bilinear",
                         align_corners=False, antialias=True)[0]


def _attach_patch(target: TargetSprite, patch: "Patch | None",
                  dtype: torch.dtype) -> torch.Tensor:
    base = target.image.to(dtype)
    if patch is None:
        return base
    x0, y0, x1, y1 = target.patch_box
    if patch.pixels.shape[1] != y1 - y0 or patch.pixels.shape[2] != x1 - x0:
        raise InvalidInputError(
            f"patch raster {tuple(patch.pixels.shape[1:])} does not fit "
            f"patch box {target.patch_box}")
    mask = patch.shape_mask.to(dtype)
    out = base.clone()
    out[:, y0:y1, x0:x1] = mask * patch.pixels.to(dtype) + (1.0 - mask) * base[:, y0:y1, x0:x1]
    return out


def _validate_placement(background: BackgroundRecord, spec: SceneSpec) -> None:
    size = background.size
    x0, y0, x1, y1 = spec.placement_box
    if x0 < 0 or y0 < 0 or x1 > size or y1 > size:
        raise InvalidInputError(
            f"placement box {spec.placement_box} outside the {size}x{size} raster "
            f"({spec.background_id})")
    if background.kind is BackgroundKind.SEMANTIC_ONLY:
        rx0, ry0, rx1, ry1 = background.position_region
        if x0 < rx0 or y0 < ry0 or x1 > rx1 or y1 > ry1:
            raise InvalidInputError(
                f"placement box {spec.placement_box} outside position region "
                f"{background.position_region} ({spec.background_id})")


def render_scene(background: BackgroundRecord, target: TargetSprite,
                 patch: "Patch | None", spec: SceneSpec) -> torch.Tensor:
    """Render one scene; the result is differentiable w.r.t. patch pixels.

    With ``patch=None`` this is the clean reference render of the same spec.
    """
    _validate_placement(background, spec)
    dtype = patch.pixels.dtype if patch is not None else background.plate.dtype
    rgba = torch.cat([
        _attach_patch(target, patch, dtype),
        target.alpha.to(dtype).unsqueeze(0),
    ], dim=0)
    rgba = _rescale(rgba, spec.scale)
    if spec.view_angle != 0.0:
        _, h2, w2 = rgba.shape
        ex, ey = warped_extent(spec.view_angle, w2, h2)
        pad_x = max(0, math.ceil(ex - w2 / 2.0)) + 1
        pad_y = max(0, math.ceil(ey - h2 / 2.0)) + 1
        rgba = F.pad(rgba, (pad_x, pad_x, pad_y, pad_y))
        rgba = perspective_warp(rgba, spec.view_angle)
    fg = grayscale_transform(rgba[:3], spec.grayscale_factor)
    alpha = rgba[3]

    out = background.plate.to(dtype).clone()
    size = background.size
    _, ch, cw = fg.shape
    x0, y0, x1, y1 = spec.placement_box
    tx = round((x0 + x1) / 2.0 - cw / 2.0)
    ty = round((y0 + y1) / 2.0 - ch / 2.0)
    sx0, sy0 = max(0, tx), max(0, ty)
    sx1, sy1 = min(size, tx + cw), min(size, ty + ch)
    if sx1 > sx0 and sy1 > sy0:
        fsub = fg[:, sy0 - ty:sy1 - ty, sx0 - tx:sx1 - tx]
        asub = alpha[sy0 - ty:sy1 - ty, sx0 - tx:sx1 - tx].unsqueeze(0)
        # clone the read slice: writing the blend back into the same memory
        # would otherwise invalidate the saved-for-backward view
        region = out[:, sy0:sy1, sx0:sx1].clone()
        out[:, sy0:sy1, sx0:sx1] = asub * fsub + (1.0 - asub) * region

    if spec.brightness != 0.0:
        out = out + spec.brightness
    if spec.noise_sigma > 0.0:
        gen = torch.Generator().manual_seed(spec.seed)
        noise = torch.randn(out.shape, generator=gen, dtype=out.dtype)
        out = out + spec.noise_sigma * noise
    return out.clamp(0.0, 1.0)


def render_background(background: BackgroundRecord, spec: SceneSpec) -> torch.Tensor:
    """The target-free frame for a spec: clean plate plus brightness and noise."""
    out = background.plate.clone()
    if spec.brightness != 0.0:
        out = out + spec.brightness
    if spec.noise_sigma > 0.0:
        gen = torch.Generator().manual_seed(spec.seed)
        out = out + spec.noise_sigma * torch.randn(out.shape, generator=gen, dtype=out.dtype)
    return out.clamp(0.0, 1.0)


def rendered_target_box(background: BackgroundRecord, target: TargetSprite,
                        spec: SceneSpec) -> Box:
    """Pixel box covered by the warped sprite in the rendered scene, clipped to it."""
    _validate_placement(background, spec)
    h2 = max(1, round(target.height * spec.scale))
    w2 = max(1, round(target.width * spec.scale))
    if spec.view_angle != 0.0:
        ex, ey = warped_extent(spec.view_angle, w2, h2)
    else:
        ex, ey = w2 / 2.0, h2 / 2.0
    x0, y0, x1, y1 = spec.placement_box
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    size = background.size
    return (
        max(0, int(math.floor(cx - ex))),
        max(0, int(math.floor(cy - ey))),
        min(size, int(math.ceil(cx + ex))),
        min(size, int(math.ceil(cy + ey))),
    )


def placement_center(spec: SceneSpec) -> tuple[float, float]:
    """Scene-frame center of the placed sprite; warp and rescale both fix it."""
    x0, y0, x1, y1 = spec.placement_box
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


def sample_scene_batch(corpus: SceneCorpus, n: int, ranges: VariationRanges, seed: int,
                       footprint: tuple[int, int] | None = None) -> list[SceneSpec]:
    """Draw ``n`` scene specs with uniform transform levels and placements.

    ``footprint`` is the (width, height) the placement box should take on
    semantic-only records; it defaults to the corpus target sprite.
    """
    if n < 1:
        raise InvalidInputError(f"batch size must be >= 1, got {n}")
    if not corpus.records:
        raise EmptyCorpusError("cannot sample scenes from an empty corpus")
    fw, fh = footprint if footprint is not None else (corpus.target.width, corpus.target.height)
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(n):
        rec = corpus.records[int(rng.integers(len(corpus.records)))]
        if rec.kind is BackgroundKind.CONTAINS_TARGET:
            box = rec.target_box
        else:
            rx0, ry0, rx1, ry1 = rec.position_region
            if rx1 - rx0 < fw or ry1 - ry0 < fh:
                raise InvalidInputError(
                    f"footprint {fw}x{fh} does not fit position region of {rec.background_id}")
            bx = int(rng.integers(rx0, rx1 - fw + 1))
            by = int(rng.integers(ry0, ry1 - fh + 1))
            box = (bx, by, bx + fw, by + fh)
        specs.append(SceneSpec(
            background_id=rec.background_id,
            placement_box=box,
            view_angle=float(rng.uniform(*ranges.angle)),
            scale=float(rng.uniform(*ranges.scale)),
            grayscale_factor=float(rng.uniform(*ranges.grayscale)),
            noise_sigma=float(rng.uniform(*ranges.noise)),
            brightness=float(rng.uniform(*ranges.brightness)),
            seed=int(rng.integers(2**31)),
        ))
    return specs
