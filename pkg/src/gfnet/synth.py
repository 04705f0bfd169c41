"""Procedural desk corpus where the class is only resolvable at full resolution.

Each image carries an 8x8 code built from 2x2 checker / anti-checker tiles.
A 2x2 area-average maps both tile kinds to the same grey, so the code is
invisible in the glance. The code sits inside a 2-pixel coloured frame whose
colour encodes a coarse class group; the frame survives downsampling and
tells a policy where to look.
"""

from __future__ import annotations

import numpy as np

from .dataio import Dataset, channel_stats

NUM_CLASSES = 10
GROUP_OF_CLASS = np.array([0, 0, 0, 0, 1, 1, 1, 2, 2, 2])
GROUP_COLOURS = np.array([[230, 40, 40], [40, 200, 60], [50, 80, 235]], dtype=np.int32)
CODE_TILES = 4  # 4x4 grid of 2x2 tiles -> 8x8 code
FRAME = 2


def class_codes(seed: int = 1234, min_distance: int = 6) -> np.ndarray:
    """(NUM_CLASSES, 4, 4) binary tile codes with pairwise Hamming distance >= ``min_distance``."""
    rng = np.random.default_rng(seed)
    codes: list[np.ndarray] = []
    while len(codes) < NUM_CLASSES:
        cand = rng.integers(0, 2, size=CODE_TILES * CODE_TILES)
        if all(np.sum(cand != c) >= min_distance for c in codes):
            codes.append(cand)
    return np.stack(codes).reshape(NUM_CLASSES, CODE_TILES, CODE_TILES)


def render_code(code: np.ndarray, lo: int = 50, hi: int = 210) -> np.ndarray:
    checker = np.array([[hi, lo], [lo, hi]])
    tiles = np.where(code[:, :, None, None] == 1, checker, checker[::-1])
    return tiles.transpose(0, 2, 1, 3).reshape(2 * CODE_TILES, 2 * CODE_TILES)


def make_images(n: int, seed: int, size: int = 32, noise: float = 12.0):
    rng = np.random.default_rng(seed)
    codes = class_codes()
    patterns = np.stack([render_code(c) for c in codes])
    labels = rng.integers(0, NUM_CLASSES, size=n)
    inner = 2 * CODE_TILES
    box = inner + 2 * FRAME
    images = np.empty((n, 3, size, size), dtype=np.uint8)
    for i in range(n):
        base = rng.normal(128.0, noise, size=(3, size, size))
        # frame corner on even coordinates keeps the code aligned with the 2x2 glance grid
        top, left = 2 * rng.integers(0, (size - box) // 2 + 1, size=2)
        colour = GROUP_COLOURS[GROUP_OF_CLASS[labels[i]]]
        base[:, top:top + box, left:left + box] = colour[:, None, None]
        code = patterns[labels[i]] + rng.normal(0.0, noise, size=(inner, inner))
        base[:, top + FRAME:top + FRAME + inner, left + FRAME:left + FRAME + inner] = code
        images[i] = np.clip(np.rint(base), 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def make_splits(n_train: int = 8000, n_val: int = 2000, n_test: int = 2000, seed: int = 0) -> dict:
    """Train/val/test datasets sharing the train-split normalization stats."""
    out = {}
    for k, (split, n) in enumerate((("train", n_train), ("val", n_val), ("test", n_test))):
        images, labels = make_images(n, seed * 1000 + k)
        out[split] = Dataset(images, labels, NUM_CLASSES, split, {"source": f"synthetic-frames(seed={seed})"})
    mean, std = channel_stats(out["train"].images)
    for ds in out.values():
        ds.manifest["normalization"] = {"mean": mean.tolist(), "std": std.tolist()}
    return out
