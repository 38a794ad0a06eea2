"""Small conversion and hashing helpers for image tensors.

Images are float tensors shaped ``(C, H, W)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidInputError


def to_tensor(array: np.ndarray) -> torch.Tensor:
    """Convert an ``(H, W, C)`` float array in [0, 1] to a ``(C, H, W)`` tensor."""
    if array.ndim != 3:
        raise InvalidInputError(f"expected an (H, W, C) array, got shape {array.shape}")
    return torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1).float()


def to_array(image: torch.Tensor) -> np.ndarray:
    """Convert a ``(C, H, W)`` tensor to an ``(H, W, C)`` float32 array."""
    if image.ndim != 3:
        raise InvalidInputError(f"expected a (C, H, W) tensor, got shape {tuple(image.shape)}")
    return image.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)


def quantize(image: torch.Tensor) -> torch.Tensor:
    """Round to the 8-bit grid, staying in float [0, 1].

    Applied when a raster is meant to be byte-identical whether it was kept
    in memory or round-tripped through a PNG file.
    """
    return torch.round(image.clamp(0.0, 1.0) * 255.0) / 255.0


def encode_png(image: torch.Tensor) -> bytes:
    """Encode a ``(3|4, H, W)`` float tensor as 8-bit PNG bytes."""
    if image.ndim != 3 or image.shape[0] not in (3, 4):
        raise InvalidInputError(f"expected a (3|4, H, W) tensor, got shape {tuple(image.shape)}")
    arr = (image.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0).round().astype(np.uint8)
    mode = "RGB" if arr.shape[2] == 3 else "RGBA"
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def save_png(image: torch.Tensor, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(image))


def load_png(path: str | Path) -> torch.Tensor:
    """Load a PNG as a float tensor in [0, 1]; RGBA files keep their alpha plane."""
    with Image.open(path) as img:
        if img.mode not in ("RGB", "RGBA"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def tensor_checksum(tensor: torch.Tensor) -> str:
    """Digest of a tensor's float32 payload; equal only for bitwise-equal content."""
    arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
    header = f"{arr.shape}|{arr.dtype}".encode()
    return hashlib.sha256(header + arr.tobytes()).hexdigest()


def file_checksum(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())
