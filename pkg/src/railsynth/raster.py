"""PNG raster I/O.

Images are 3-channel RGB uint8. Binary masks are stored as 1-channel
8-bit PNGs with values {0, 255} and thresholded at 128 on load, so a
mask survives any editor that preserves 8-bit grayscale.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path: str | Path) -> np.ndarray:
    """Load an RGB image as uint8 H×W×3."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path: str | Path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H×W×3 image, got shape {image.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image.astype(np.uint8)), "RGB").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    """Load a binary mask as uint8 H×W with values {0, 1}."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.uint8)
    return (gray >= 128).astype(np.uint8)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise ValueError(f"expected H×W mask, got shape {mask.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = np.where(mask > 0, 255, 0).astype(np.uint8)
    Image.fromarray(data, "L").save(path)
