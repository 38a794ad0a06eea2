"""Binary mask builders for patch shapes."""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

from .errors import InvalidInputError


def fill_rows_outward(allowed: torch.Tensor, band: tuple[int, int], count: int) -> torch.Tensor:
    """Fill exactly ``count`` allowed pixels in rows growing away from a band.

    Rows adjacent to the excluded band fill first, alternating above and
    below, each row left to right, so the result is two horizontal strips
    hugging the band. Raises when the allowed area cannot hold ``count``.
    """
    if allowed.ndim != 2:
        raise InvalidInputError(f"expected a 2-d mask, got shape {tuple(allowed.shape)}")
    if count < 1:
        raise InvalidInputError(f"pixel count must be >= 1, got {count}")
    h = allowed.shape[0]
    r0, r1 = band
    order = []
    up, down = r0 - 1, r1
    while up >= 0 or down < h:
        if up >= 0:
            order.append(up)
            up -= 1
        if down < h:
            order.append(down)
            down += 1
    mask = torch.zeros_like(allowed, dtype=torch.float32)
    allowed_b = allowed > 0.5
    remaining = count
    for row in order:
        cols = torch.nonzero(allowed_b[row], as_tuple=False).flatten()
        if cols.numel() == 0:
            continue
        take = cols[:remaining]
        mask[row, take] = 1.0
        remaining -= int(take.numel())
        if remaining == 0:
            return mask
    raise InvalidInputError(
        f"allowed area holds {count - remaining} pixels, {count} requested")


def center_square_mask(side: int, fraction: float) -> torch.Tensor:
    """Mask of a centered square whose side is ``fraction`` of the raster side."""
    if side < 1:
        raise InvalidInputError(f"side must be >= 1, got {side}")
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"fraction {fraction} outside (0, 1]")
    inner = max(1, round(side * fraction))
    off = (side - inner) // 2
    mask = torch.zeros((side, side), dtype=torch.float32)
    mask[off:off + inner, off:off + inner] = 1.0
    return mask


def letter_mask(side: int, letter: str, fill_fraction: float = 0.8) -> torch.Tensor:
    """Binary mask shaped like a single glyph, centered on the raster."""
    if len(letter) != 1:
        raise InvalidInputError(f"need a single character, got {letter!r}")
    if side < 8:
        raise InvalidInputError(f"side {side} too small for a glyph")
    img = Image.new("L", (side, side), 0)
    drawer = ImageDraw.Draw(img)
    font = ImageFont.load_default(size=int(side * fill_fraction))
    x0, y0, x1, y1 = drawer.textbbox((0, 0), letter, font=font)
    pos = ((side - (x1 - x0)) // 2 - x0, (side - (y1 - y0)) // 2 - y0)
    drawer.text(pos, letter, fill=255, font=font)
    arr = np.asarray(img) > 127
    if not arr.any():
        raise InvalidInputError(f"glyph {letter!r} rendered empty at side {side}")
    return torch.from_numpy(arr).float()
