from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class ImageReadError(OSError):
    pass


def load_image(path: str | Path) -> np.ndarray:
    """RGB image as float64 (H, W, 3) in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def save_image(arr: np.ndarray, path: str | Path) -> None:
    data = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64)).permute(2, 0, 1)[None]
    y = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
    return y[0].permute(1, 2, 0).numpy()


def ensure_min_side(arr: np.ndarray, side: int) -> np.ndarray:
    """Bilinearly upscale so both dimensions are at least ``side``."""
    h, w = arr.shape[:2]
    if h >= side and w >= side:
        return arr
    scale = side / min(h, w)
    return resize_bilinear(arr, max(side, int(np.ceil(h * scale))), max(side, int(np.ceil(w * scale))))


def grayscale(arr: np.ndarray) -> np.ndarray:
    return arr @ np.array([0.299, 0.587, 0.114])
