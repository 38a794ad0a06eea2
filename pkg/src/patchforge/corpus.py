"""Synthetic scene corpus: procedurally drawn backgrounds and sign sprites.

Records come in two kinds. ``CONTAINS_TARGET`` records show the target sign
drawn into the scene and carry a clean plate (the same scene without the
sign) so a renderer can swap in a transformed or patched copy.
``SEMANTIC_ONLY`` records have no target but mark a region where one could
plausibly stand.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from skimage import draw

from . import images
from .errors import CheckpointError, InvalidInputError

CLASS_NAMES = ("octagon-sign", "circle-sign", "triangle-sign", "billboard")
NUM_CLASSES = len(CLASS_NAMES)
TARGET_CLASS = 0

Box = tuple[int, int, int, int]

_RED_FACE = (0.70, 0.10, 0.12)
_BLUE_FACE = (0.12, 0.26, 0.72)
_YELLOW_FACE = (0.86, 0.72, 0.12)
_SIGN_WHITE = (0.94, 0.94, 0.94)
_POLE_GRAY = (0.44, 0.44, 0.47)
_POLE_EDGE = (0.33, 0.33, 0.36)


class BackgroundKind(str, Enum):
    CONTAINS_TARGET = "contains_target"
    SEMANTIC_ONLY = "semantic_only"


@dataclass(frozen=True)
class Annotation:
    """A non-target object drawn into a background, with its pixel box."""

    class_id: int
    box: Box


@dataclass
class TargetSprite:
    """Native raster of a plantable sign: RGB image plus a binary alpha plane.

    ``patch_box`` is the square sub-region where a patch may attach,
    ``face_mask`` the sign face (alpha minus pole), and ``legend_rows`` the
    row band carrying the legend, which patches must avoid.
    """

    image: torch.Tensor
    alpha: torch.Tensor
    patch_box: Box
    class_id: int
    object_area: int
    face_mask: torch.Tensor
    legend_rows: tuple[int, int]

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise InvalidInputError("sprite image must be (3, H, W)")
        if self.alpha.shape != self.image.shape[1:]:
            raise InvalidInputError("sprite alpha must match image height/width")

    @property
    def height(self) -> int:
        return int(self.image.shape[1])

    @property
    def width(self) -> int:
        return int(self.image.shape[2])


@dataclass
class BackgroundRecord:
    background_id: str
    image: torch.Tensor
    plate: torch.Tensor
    kind: BackgroundKind
    target_box: Box | None = None
    position_region: Box | None = None
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        if self.kind is BackgroundKind.CONTAINS_TARGET and self.target_box is None:
            raise InvalidInputError(f"{self.background_id}: contains_target record needs target_box")
        if self.kind is BackgroundKind.SEMANTIC_ONLY and self.position_region is None:
            raise InvalidInputError(f"{self.background_id}: semantic_only record needs position_region")

    @property
    def size(self) -> int:
        return int(self.image.shape[1])

    def placement_region(self) -> Box:
        """Where a target footprint may be anchored on this record."""
        if self.kind is BackgroundKind.CONTAINS_TARGET:
            return self.target_box
        return self.position_region


@dataclass
class SceneCorpus:
    records: list[BackgroundRecord]
    target: TargetSprite
    manifest_checksum: str
    root: Path | None = None

    def __post_init__(self):
        ids = [r.background_id for r in self.records]
        if len(ids) != len(set(ids)):
            raise InvalidInputError("background ids must be unique")
        self._by_id = {r.background_id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def record(self, background_id: str) -> BackgroundRecord:
        try:
            return self._by_id[background_id]
        except KeyError:
            raise InvalidInputError(f"unknown background id {background_id!r}") from None


@dataclass(frozen=True)
class CorpusConfig:
    n_road: int = 12
    n_indoor: int = 6
    contains_target_fraction: float = 0.5
    image_size: int = 104
    target_face: int = 40
    pole_width: int = 5
    pole_height: int = 26
    max_distractors: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_road < 0 or self.n_indoor < 0:
            raise InvalidInputError("record counts must be non-negative")
        if not 0.0 <= self.contains_target_fraction <= 1.0:
            raise InvalidInputError("contains_target_fraction must be in [0, 1]")
        if self.image_size < 32:
            raise InvalidInputError("image_size below 32 leaves no room for scenes")
        if self.target_face + self.pole_height + 6 > self.image_size:
            raise InvalidInputError("target sprite does not fit the image size")


# ---------------------------------------------------------------------------
# sprite drawing


def _octagon_mask(side: int, inset: float = 0.0) -> np.ndarray:
    cut = (side - 2 * inset) / (2.0 + math.sqrt(2.0))
    lo, hi = inset, side - inset
    pts = [
        (lo, lo + cut), (lo, hi - cut), (lo + cut, hi), (hi - cut, hi),
        (hi, hi - cut), (hi, lo + cut), (hi - cut, lo), (lo + cut, lo),
    ]
    rr, cc = draw.polygon([p[0] for p in pts], [p[1] for p in pts], shape=(side, side))
    mask = np.zeros((side, side), dtype=bool)
    mask[rr, cc] = True
    return mask


def _paint(rgb: np.ndarray, mask: np.ndarray, color: tuple[float, float, float]) -> None:
    rgb[mask] = color


def _octagon_face(side: int) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    outer = _octagon_mask(side)
    inner = _octagon_mask(side, inset=max(2.0, side * 0.07))
    rgb = np.zeros((side, side, 3), dtype=np.float32)
    _paint(rgb, outer, _SIGN_WHITE)
    _paint(rgb, inner, _RED_FACE)
    r0, r1 = int(side * 0.40), int(side * 0.60)
    band = np.zeros_like(outer)
    band[r0:r1] = True
    _paint(rgb, band & inner, _SIGN_WHITE)
    return rgb, outer, (r0, r1)


def _circle_face(side: int) -> tuple[np.ndarray, np.ndarray]:
    c = (side - 1) / 2.0
    outer = np.zeros((side, side), dtype=bool)
    rr, cc = draw.disk((c, c), side / 2.0 - 0.5, shape=(side, side))
    outer[rr, cc] = True
    inner = np.zeros_like(outer)
    rr, cc = draw.disk((c, c), side / 2.0 - max(2.5, side * 0.09), shape=(side, side))
    inner[rr, cc] = True
    rgb = np.zeros((side, side, 3), dtype=np.float32)
    _paint(rgb, outer, _SIGN_WHITE)
    _paint(rgb, inner, _BLUE_FACE)
    bar = np.zeros_like(outer)
    bar[int(side * 0.44):int(side * 0.56)] = True
    _paint(rgb, bar & inner, _SIGN_WHITE)
    return rgb, outer


def _triangle_face(side: int) -> tuple[np.ndarray, np.ndarray]:
    pts = np.array([(side - 1.0, 1.0), (side - 1.0, side - 2.0), (1.0, (side - 1) / 2.0)])
    centroid = pts.mean(axis=0)
    inner_pts = centroid + (pts - centroid) * 0.72
    outer = np.zeros((side, side), dtype=bool)
    rr, cc = draw.polygon(pts[:, 0], pts[:, 1], shape=(side, side))
    outer[rr, cc] = True
    inner = np.zeros_like(outer)
    rr, cc = draw.polygon(inner_pts[:, 0], inner_pts[:, 1], shape=(side, side))
    inner[rr, cc] = True
    rgb = np.zeros((side, side, 3), dtype=np.float32)
    _paint(rgb, outer, (0.45, 0.30, 0.06))
    _paint(rgb, inner, _YELLOW_FACE)
    return rgb, outer


def _with_pole(face_rgb: np.ndarray, face_alpha: np.ndarray,
               pole_w: int, pole_h: int) -> tuple[np.ndarray, np.ndarray]:
    side = face_rgb.shape[0]
    h = side + pole_h
    rgb = np.zeros((h, side, 3), dtype=np.float32)
    alpha = np.zeros((h, side), dtype=np.float32)
    rgb[:side] = face_rgb
    alpha[:side] = face_alpha
    x0 = side // 2 - pole_w // 2
    rgb[side:, x0:x0 + pole_w] = _POLE_GRAY
    rgb[side:, x0] = _POLE_EDGE
    alpha[side:, x0:x0 + pole_w] = 1.0
    return rgb, alpha


def _billboard_sprite(width: int) -> tuple[np.ndarray, np.ndarray]:
    # deliberately shares the target palette (white frame, red panel, white
    # band) at a wide aspect, so palette alone cannot separate the classes
    bh = max(4, int(round(width * 0.40)))
    legs = max(3, width // 6)
    h = bh + legs
    rgb = np.zeros((h, width, 3), dtype=np.float32)
    alpha = np.zeros((h, width), dtype=np.float32)
    rgb[:bh] = _SIGN_WHITE
    inset = max(1, width // 20)
    rgb[inset:bh - inset, inset:width - inset] = _RED_FACE
    r0 = int(bh * 0.40)
    r1 = max(r0 + 1, int(bh * 0.60))
    rgb[r0:r1, inset:width - inset] = _SIGN_WHITE
    alpha[:bh] = 1.0
    for x0 in (2, width - 2 - max(2, width // 10)):
        w = max(2, width // 10)
        rgb[bh:, x0:x0 + w] = _POLE_EDGE
        alpha[bh:, x0:x0 + w] = 1.0
    return rgb, alpha


def _distractor_sprite(class_id: int, face: int) -> tuple[np.ndarray, np.ndarray]:
    if class_id == 1:
        rgb, alpha = _circle_face(face)
    elif class_id == 2:
        rgb, alpha = _triangle_face(face)
    elif class_id == 3:
        return _billboard_sprite(face)
    else:
        raise InvalidInputError(f"no distractor sprite for class {class_id}")
    pole_h = max(6, int(face * 0.6))
    return _with_pole(rgb, alpha, max(3, face // 8), pole_h)


def make_target_sprite(face: int, pole_width: int, pole_height: int) -> TargetSprite:
    """Draw the native octagon target: white-bordered red face on a gray pole."""
    face_rgb, face_alpha, legend = _octagon_face(face)
    rgb, alpha = _with_pole(face_rgb, face_alpha, pole_width, pole_height)
    image = images.quantize(images.to_tensor(rgb))
    face_mask = torch.zeros(alpha.shape, dtype=torch.float32)
    face_mask[:face] = torch.from_numpy(face_alpha.astype(np.float32))
    return TargetSprite(
        image=image,
        alpha=torch.from_numpy(alpha),
        patch_box=(0, 0, face, face),
        class_id=TARGET_CLASS,
        object_area=int(face_alpha.sum()),
        face_mask=face_mask,
        legend_rows=legend,
    )


# ---------------------------------------------------------------------------
# background drawing


def _vertical_gradient(size: int, top: np.ndarray, bottom: np.ndarray) -> np.ndarray:
    t = np.linspace(0.0, 1.0, size, dtype=np.float32)[:, None, None]
    return (1.0 - t) * top[None, None, :] + t * bottom[None, None, :]


def _road_background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, Box]:
    jitter = rng.uniform(-0.05, 0.05, size=3).astype(np.float32)
    sky_top = np.array([0.50, 0.66, 0.85], np.float32) + jitter
    sky_bot = sky_top + 0.10
    horizon = int(rng.integers(int(size * 0.38), int(size * 0.50)))
    canvas = np.empty((size, size, 3), dtype=np.float32)
    canvas[:horizon] = _vertical_gradient(horizon, sky_top, sky_bot)
    grass = np.array([0.34, 0.44, 0.28], np.float32) + rng.uniform(-0.04, 0.04, 3).astype(np.float32)
    canvas[horizon:] = _vertical_gradient(size - horizon, grass, grass * 0.8)

    for _ in range(int(rng.integers(1, 4))):
        w = int(rng.integers(8, 20))
        h = int(rng.integers(8, 22))
        x = int(rng.integers(0, max(1, size // 2 - w)))
        color = rng.uniform(0.35, 0.6, size=3).astype(np.float32)
        canvas[max(0, horizon - h):horizon, x:x + w] = color

    vx = size / 2 + rng.uniform(-8, 8)
    bottom_w = rng.uniform(size * 0.38, size * 0.55)
    bx = size / 2 + rng.uniform(-6, 6)
    road_pts_r = [horizon, horizon, size - 1, size - 1]
    road_pts_c = [vx - 3, vx + 3, bx + bottom_w / 2, bx - bottom_w / 2]
    rr, cc = draw.polygon(road_pts_r, road_pts_c, shape=(size, size))
    road_gray = 0.40 + rng.uniform(-0.04, 0.04)
    canvas[rr, cc] = (road_gray, road_gray, road_gray + 0.01)

    for y in range(horizon + 4, size - 2, 8):
        t = (y - horizon) / (size - horizon)
        cx = int(vx + (bx - vx) * t)
        w = max(1, int(1 + 3 * t))
        canvas[y:y + 3, cx - w // 2:cx - w // 2 + w] = 0.82

    canvas += rng.normal(0.0, 0.008, size=(size, size, 1)).astype(np.float32)
    region = (int(size * 0.54), max(4, horizon - 28), size - 2, size - 2)
    return np.clip(canvas, 0.0, 1.0), region


def _indoor_background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, Box]:
    wall = np.array([0.70, 0.64, 0.56], np.float32) + rng.uniform(-0.08, 0.08, 3).astype(np.float32)
    floor_y = int(rng.integers(int(size * 0.62), int(size * 0.76)))
    canvas = np.empty((size, size, 3), dtype=np.float32)
    canvas[:floor_y] = _vertical_gradient(floor_y, wall, wall * 0.92)
    floor = np.array([0.46, 0.36, 0.27], np.float32) + rng.uniform(-0.05, 0.05, 3).astype(np.float32)
    canvas[floor_y:] = _vertical_gradient(size - floor_y, floor, floor * 0.85)
    canvas[floor_y:floor_y + 3] = 0.28
    for y in range(floor_y + 8, size, 7):
        canvas[y, :] *= 0.92

    for _ in range(int(rng.integers(1, 3))):
        w = int(rng.integers(10, 24))
        h = int(rng.integers(10, 20))
        x = int(rng.integers(2, max(3, size // 2 - w)))
        y = int(rng.integers(4, max(5, floor_y - h - 4)))
        color = rng.uniform(0.4, 0.85, size=3).astype(np.float32)
        canvas[y:y + h, x:x + w] = color
        canvas[y:y + 2, x:x + w] = color * 0.6
        canvas[y + h - 2:y + h, x:x + w] = color * 0.6

    canvas += rng.normal(0.0, 0.006, size=(size, size, 1)).astype(np.float32)
    region = (int(size * 0.50), 8, size - 2, size - 2)
    return np.clip(canvas, 0.0, 1.0), region


def _shrink_region(region: Box, fw: int, fh: int, size: int) -> Box:
    """Clamp a plausible-position region so a (fw, fh) footprint always fits."""
    x0, y0, x1, y1 = region
    x1 = min(x1, size)
    y1 = min(y1, size)
    if x1 - x0 < fw:
        x0 = max(0, x1 - fw)
    if y1 - y0 < fh:
        y0 = max(0, y1 - fh)
    if x1 - x0 < fw or y1 - y0 < fh:
        raise InvalidInputError("position region cannot accommodate the target footprint")
    return (x0, y0, x1, y1)


def _stamp(canvas: np.ndarray, rgb: np.ndarray, alpha: np.ndarray, x0: int, y0: int) -> Box:
    h, w = alpha.shape
    a = alpha[..., None]
    canvas[y0:y0 + h, x0:x0 + w] = a * rgb + (1.0 - a) * canvas[y0:y0 + h, x0:x0 + w]
    rows = np.nonzero(alpha.any(axis=1))[0]
    cols = np.nonzero(alpha.any(axis=0))[0]
    return (x0 + int(cols[0]), y0 + int(rows[0]), x0 + int(cols[-1]) + 1, y0 + int(rows[-1]) + 1)


def _boxes_overlap(a: Box, b: Box) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def _place_distractors(canvas: np.ndarray, rng: np.random.Generator,
                       keepout: list[Box], max_count: int) -> list[Annotation]:
    size = canvas.shape[0]
    annotations: list[Annotation] = []
    placed = list(keepout)
    for _ in range(int(rng.integers(0, max_count + 1))):
        class_id = int(rng.integers(1, NUM_CLASSES))
        face = int(rng.integers(10, 28))
        rgb, alpha = _distractor_sprite(class_id, face)
        h, w = alpha.shape
        if h + 2 >= size or w + 2 >= size:
            continue
        for _ in range(20):
            x0 = int(rng.integers(1, size - w - 1))
            y0 = int(rng.integers(1, size - h - 1))
            box = (x0, y0, x0 + w, y0 + h)
            if not any(_boxes_overlap(box, other) for other in placed):
                tight = _stamp(canvas, rgb, alpha, x0, y0)
                annotations.append(Annotation(class_id=class_id, box=tight))
                placed.append(box)
                break
    return annotations


# ---------------------------------------------------------------------------
# corpus assembly and persistence


def build_synthetic_corpus(config: CorpusConfig, out_dir: str | Path | None = None) -> SceneCorpus:
    """Draw all records and the target sprite; write them when out_dir is given.

    Rasters are quantized to the 8-bit grid at build time so a corpus built
    in memory is bitwise identical to the same corpus written and reloaded.
    """
    rng = np.random.default_rng(config.seed)
    target = make_target_sprite(config.target_face, config.pole_width, config.pole_height)
    records: list[BackgroundRecord] = []
    plans = [("road", _road_background)] * config.n_road + [("indoor", _indoor_background)] * config.n_indoor
    counters = {"road": 0, "indoor": 0}
    for family, draw_fn in plans:
        idx = counters[family]
        counters[family] += 1
        canvas, region = draw_fn(rng, config.image_size)
        region = _shrink_region(region, target.width, target.height, config.image_size)
        contains = bool(rng.random() < config.contains_target_fraction)
        if contains:
            x0, y0, x1, y1 = region
            tx = int(rng.integers(x0, x1 - target.width + 1))
            ty = int(rng.integers(y0, y1 - target.height + 1))
            target_box = (tx, ty, tx + target.width, ty + target.height)
            keepout = [target_box]
        else:
            target_box = None
            keepout = [region]
        annotations = _place_distractors(canvas, rng, keepout, config.max_distractors)
        plate = images.quantize(images.to_tensor(canvas))
        if contains:
            shot = canvas.copy()
            rgb = target.image.permute(1, 2, 0).numpy()
            _stamp(shot, rgb, target.alpha.numpy(), target_box[0], target_box[1])
            image = images.quantize(images.to_tensor(shot))
        else:
            image = plate
        records.append(BackgroundRecord(
            background_id=f"{family}-{idx:03d}",
            image=image,
            plate=plate,
            kind=BackgroundKind.CONTAINS_TARGET if contains else BackgroundKind.SEMANTIC_ONLY,
            target_box=target_box,
            position_region=None if contains else region,
            annotations=annotations,
        ))

    manifest = _manifest_dict(config, target, records)
    checksum = _manifest_digest(manifest)
    corpus = SceneCorpus(records=records, target=target, manifest_checksum=checksum)
    if out_dir is not None:
        save_corpus(corpus, out_dir, manifest=manifest)
    return corpus


def _canonical_json(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _manifest_digest(manifest: dict) -> str:
    """Digest over corpus content; provenance-only keys stay out so a saved
    and reloaded corpus keeps the checksum it was built with."""
    content = {k: v for k, v in manifest.items() if k not in ("manifest_checksum", "seed")}
    return images.sha256_bytes(_canonical_json(content).encode())


def _target_rgba(target: TargetSprite) -> torch.Tensor:
    return torch.cat([target.image, target.alpha.unsqueeze(0)], dim=0)


def _manifest_dict(config: CorpusConfig, target: TargetSprite,
                   records: list[BackgroundRecord]) -> dict:
    entries = []
    for rec in records:
        png = images.encode_png(rec.image)
        entry = {
            "background_id": rec.background_id,
            "kind": rec.kind.value,
            "image": f"{rec.background_id}.png",
            "image_sha256": images.sha256_bytes(png),
            "target_box": list(rec.target_box) if rec.target_box else None,
            "position_region": list(rec.position_region) if rec.position_region else None,
            "annotations": [{"class_id": a.class_id, "box": list(a.box)} for a in rec.annotations],
        }
        if rec.kind is BackgroundKind.CONTAINS_TARGET:
            plate_png = images.encode_png(rec.plate)
            entry["plate"] = f"{rec.background_id}_plate.png"
            entry["plate_sha256"] = images.sha256_bytes(plate_png)
        else:
            entry["plate"] = None
        entries.append(entry)
    target_png = images.encode_png(_target_rgba(target))
    return {
        "format": "patchforge-corpus/1",
        "seed": config.seed,
        "image_size": config.image_size,
        "classes": list(CLASS_NAMES),
        "target": {
            "file": "target.png",
            "sha256": images.sha256_bytes(target_png),
            "patch_box": list(target.patch_box),
            "class_id": target.class_id,
            "object_area": target.object_area,
            "face_rows": target.patch_box[3] - target.patch_box[1],
            "legend_rows": list(target.legend_rows),
        },
        "records": entries,
    }


def save_corpus(corpus: SceneCorpus, out_dir: str | Path, manifest: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        cfg_stub = CorpusConfig(n_road=0, n_indoor=0,
                                image_size=corpus.records[0].size if corpus.records else 104)
        manifest = _manifest_dict(cfg_stub, corpus.target, corpus.records)
        manifest["seed"] = None
    images.save_png(_target_rgba(corpus.target), out / "target.png")
    for rec in corpus.records:
        images.save_png(rec.image, out / f"{rec.background_id}.png")
        if rec.kind is BackgroundKind.CONTAINS_TARGET:
            images.save_png(rec.plate, out / f"{rec.background_id}_plate.png")
    manifest = dict(manifest)
    manifest["manifest_checksum"] = _manifest_digest(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    corpus.root = out
    return out


def load_corpus(root: str | Path) -> SceneCorpus:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise CheckpointError(f"no manifest.json under {root}")
    manifest = json.loads(path.read_text())
    stored = manifest.pop("manifest_checksum", None)
    recomputed = _manifest_digest(manifest)
    if stored is not None and stored != recomputed:
        raise CheckpointError(f"manifest checksum mismatch under {root}")

    def verified(name: str, expected: str | None) -> Path:
        file = root / name
        if not file.is_file():
            raise CheckpointError(f"missing corpus file {name}")
        if expected is not None and images.file_checksum(file) != expected:
            raise CheckpointError(f"checksum mismatch for corpus file {name}")
        return file

    rgba = images.load_png(verified(manifest["target"]["file"],
                                    manifest["target"].get("sha256")))
    if rgba.shape[0] != 4:
        raise CheckpointError("target raster must be RGBA")
    t = manifest["target"]
    face = t["face_rows"]
    alpha = (rgba[3] > 0.5).float()
    face_mask = torch.zeros_like(alpha)
    face_mask[:face] = alpha[:face]
    target = TargetSprite(
        image=rgba[:3],
        alpha=alpha,
        patch_box=tuple(t["patch_box"]),
        class_id=t["class_id"],
        object_area=t["object_area"],
        face_mask=face_mask,
        legend_rows=tuple(t["legend_rows"]),
    )
    records = []
    for entry in manifest["records"]:
        image = images.load_png(verified(entry["image"], entry.get("image_sha256")))
        kind = BackgroundKind(entry["kind"])
        plate = (images.load_png(verified(entry["plate"], entry.get("plate_sha256")))
                 if entry["plate"] else image)
        records.append(BackgroundRecord(
            background_id=entry["background_id"],
            image=image,
            plate=plate,
            kind=kind,
            target_box=tuple(entry["target_box"]) if entry["target_box"] else None,
            position_region=tuple(entry["position_region"]) if entry["position_region"] else None,
            annotations=[Annotation(a["class_id"], tuple(a["box"])) for a in entry["annotations"]],
        ))
    return SceneCorpus(records=records, target=target, manifest_checksum=recomputed, root=root)
