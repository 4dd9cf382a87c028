"""PNG I/O: 8-bit at the file boundary, float ``[0, 1]`` ``(H, W, 3)`` inside."""
from __future__ import annotations

import numpy as np
from PIL import Image


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path)
