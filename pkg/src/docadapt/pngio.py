"""Lossless grayscale PNG read/write for rendered pages."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import RunIOError


def save_gray(path, image: np.ndarray) -> None:
    """Write a [0,1] float image as an 8-bit grayscale PNG."""
    arr = np.asarray(image, dtype=np.float64)
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(u8, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise RunIOError(f"cannot write image {path}: {exc}") from exc


def load_gray(path) -> np.ndarray:
    """Read an image file as a float32 grayscale grid in [0,1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except OSError as exc:
        raise RunIOError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0
