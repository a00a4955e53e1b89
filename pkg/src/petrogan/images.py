"""Image loading, saving, and range conversions.

The pipeline currency is an H x W x C float32 array with values in [0, 1].
Networks run in a symmetric native range; the helpers here convert at the
boundary so every stage agrees on what an image is.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path) -> np.ndarray:
    """Read PNG/JPEG into float32 HWC RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(image: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    to_pil(image).save(path, format="PNG")


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    to_pil(image).save(buf, format="PNG")
    return buf.getvalue()


def to_pil(image: np.ndarray) -> Image.Image:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    return Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8))


def to_native(image: np.ndarray) -> np.ndarray:
    """[0,1] HWC -> network-native CHW in [-1, 1]."""
    return (np.asarray(image, dtype=np.float32).transpose(2, 0, 1) * 2.0) - 1.0


def from_native(batch: np.ndarray) -> np.ndarray:
    """Native NCHW (or CHW) -> [0,1] HWC image(s), clipped."""
    arr = np.asarray(batch, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    out = np.clip(arr * 0.5 + 0.5, 0.0, 1.0).transpose(0, 2, 3, 1)
    return out[0] if single else out


def make_grid(images, rows: int, cols: int, pad: int = 2) -> np.ndarray:
    """Tile HWC images into a rows x cols contact sheet with white gutters."""
    images = list(images)
    h, w, c = images[0].shape
    grid = np.ones((rows * h + (rows - 1) * pad,
                    cols * w + (cols - 1) * pad, c), dtype=np.float32)
    for k, img in enumerate(images[: rows * cols]):
        r, cl = divmod(k, cols)
        y, x = r * (h + pad), cl * (w + pad)
        grid[y:y + h, x:x + w] = img
    return grid


def center_crop_resize(image: np.ndarray, size: int) -> np.ndarray:
    """Aspect-preserving center crop to square, then resize to size x size."""
    h, w = image.shape[:2]
    side = min(h, w)
    y = (h - side) // 2
    x = (w - side) // 2
    crop = image[y:y + side, x:x + side]
    if side == size:
        return crop.astype(np.float32)
    pil = to_pil(crop).resize((size, size), Image.LANCZOS)
    return np.asarray(pil, dtype=np.float32) / 255.0
