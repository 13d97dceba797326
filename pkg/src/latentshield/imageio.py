"""PNG image I/O and the float sidecar.

Images travel as (C, H, W) float64 arrays in [0, 1]; files are 8-bit
RGB (or grayscale) PNG. The optional sidecar keeps the unquantized
perturbation in the LSE1 container.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from latentshield.container import SECTION_TENSOR, load_container, save_container

__all__ = ["load_image", "save_image_png", "save_float_sidecar", "load_float_sidecar"]


def load_image(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("RGB", "L"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.moveaxis(arr, 2, 0)


def save_image_png(path, x: np.ndarray) -> None:
    arr = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.shape[0] == 1:
        img = Image.fromarray(u8[0], mode="L")
    elif u8.shape[0] == 3:
        img = Image.fromarray(np.moveaxis(u8, 0, 2), mode="RGB")
    else:
        raise ValueError(f"PNG output needs 1 or 3 channels, got {u8.shape[0]}")
    img.save(path, format="PNG")


def save_float_sidecar(path, name: str, arrays: dict[str, np.ndarray], seed: int = 0) -> None:
    save_container(path, SECTION_TENSOR, name, seed, list(arrays.items()))


def load_float_sidecar(path) -> dict[str, np.ndarray]:
    return load_container(path, expect_section=SECTION_TENSOR).arrays
