"""Deterministic synthetic image corpus for desk-scale experiments.

Real photographs are out of scope, so experiments run on generated
"subjects": each subject is a fixed arrangement of smooth Gaussian
blobs over a gradient background, and its images are small jittered
views of that arrangement (same subject, different shots). Values stay
inside [0.03, 0.97] so quantization and corruption never clip.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_subject_images", "make_test_image"]


def _blob_canvas(rng: np.random.Generator, size: int, n_blobs: int,
                 jitter: np.random.Generator | None = None) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((3, size, size))
    tilt = rng.uniform(-0.4, 0.4, size=3)
    base = rng.uniform(0.3, 0.6, size=3)
    for c in range(3):
        img[c] = base[c] + tilt[c] * (ys - 0.5) + tilt[(c + 1) % 3] * (xs - 0.5)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        if jitter is not None:
            cy += jitter.uniform(-0.05, 0.05)
            cx += jitter.uniform(-0.05, 0.05)
        rad = rng.uniform(0.08, 0.25)
        amp = rng.uniform(-0.35, 0.35, size=3)
        bump = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * rad ** 2))
        img += amp[:, None, None] * bump
    return img


def _squash(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    span = (hi - lo) or 1.0
    return 0.03 + 0.94 * (img - lo) / span


def make_subject_images(subject_seed: int, n_images: int, size: int,
                        n_blobs: int = 4) -> list[np.ndarray]:
    """n jittered shots of one synthetic subject, each (3, size, size)."""
    out = []
    for k in range(n_images):
        layout = np.random.default_rng(np.random.SeedSequence((subject_seed, 0)))
        jitter = np.random.default_rng(np.random.SeedSequence((subject_seed, 1, k)))
        img = _blob_canvas(layout, size, n_blobs, jitter=jitter)
        img += 0.015 * jitter.standard_normal(img.shape)
        out.append(_squash(img))
    return out


def make_test_image(seed: int, size: int, channels: int = 3) -> np.ndarray:
    """One standalone structured image, (channels, size, size)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7)))
    img = _blob_canvas(rng, size, n_blobs=5)
    img += 0.02 * rng.standard_normal(img.shape)
    img = _squash(img)
    return img[:channels] if channels < 3 else img
