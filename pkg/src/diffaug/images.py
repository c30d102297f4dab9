"""8-bit RGB PNG read/write and batch loading of manifest images."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import Manifest
from .errors import DataError


def save_png(arr: np.ndarray, path) -> None:
    """``arr`` is HxWx3 float in [0, 1] or uint8."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    # fixed compression settings keep the bytes reproducible
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_png(path, size: int | None = None) -> np.ndarray:
    """Return HxWx3 float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None
    return arr.astype(np.float32) / 255.0


def load_manifest_images(m: Manifest, size: int | None = None) -> np.ndarray:
    """Stack every record's image into an (N, H, W, 3) float32 array."""
    if not m.records:
        return np.zeros((0, size or 0, size or 0, 3), dtype=np.float32)
    return np.stack([load_png(m.resolve(r), size) for r in m.records])


def list_pngs(directory) -> list[Path]:
    return sorted(Path(directory).rglob("*.png"))
