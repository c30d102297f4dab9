"""Procedural stand-in data: six separable lesion-like classes plus non-domain images.

Each class differs in lesion hue, lesion count and background texture frequency;
within a class, positions, sizes, tones and noise vary per image.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from .dataset import DEFAULT_TAXONOMY, ClassTaxonomy, ImageRecord, Manifest, new_manifest, save_manifest
from .images import save_png

MANIFEST_NAME = "manifest.jsonl"
# per-image hue jitter; adjacent class hues sit 1/6 apart, so wide jitter makes neighbours overlap
HUE_JITTER = 0.08


def _class_style(idx: int, n_classes: int) -> dict:
    return {
        "hue": idx / n_classes,
        "blobs": 1 + idx % 3,
        "freq": 1.5 + 0.75 * ((idx * 5) % n_classes),
    }


def render_toy_image(class_idx: int, rng: np.random.Generator, size: int = 32,
                     n_classes: int = 6) -> np.ndarray:
    style = _class_style(class_idx, n_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    base = np.array([0.86, 0.70, 0.60]) + rng.normal(0, 0.04, 3)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * style["freq"] * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = base[None, None, :] + 0.07 * wave[..., None]

    hue = (style["hue"] + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
    color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 0.85), rng.uniform(0.45, 0.7)))
    for _ in range(style["blobs"]):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        r = rng.uniform(0.09, 0.15)
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        mask = 1.0 / (1.0 + np.exp((np.sqrt(d2) - r) / 0.02))
        img = img * (1 - mask[..., None]) + color[None, None, :] * mask[..., None]

    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def render_negative_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Out-of-domain image: noise, stripes, checkerboards or flat gradients."""
    kind = rng.integers(4)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if kind == 0:
        img = rng.uniform(0, 1, (size, size, 3))
    elif kind == 1:
        c1, c2 = rng.uniform(0, 1, (2, 3))
        band = (np.sin(2 * np.pi * rng.uniform(2, 6) * (xx if rng.random() < 0.5 else yy)) > 0)
        img = np.where(band[..., None], c1, c2)
    elif kind == 2:
        c1, c2 = rng.uniform(0, 1, (2, 3))
        k = rng.integers(2, 8)
        board = ((np.floor(xx * k) + np.floor(yy * k)) % 2).astype(bool)
        img = np.where(board[..., None], c1, c2)
    else:
        c1, c2 = rng.uniform(0, 1, (2, 3))
        t = (xx * rng.uniform(-1, 1) + yy * rng.uniform(-1, 1))
        t = (t - t.min()) / max(np.ptp(t), 1e-6)
        img = c1 * (1 - t[..., None]) + c2 * t[..., None]
    return np.clip(img + rng.normal(0, 0.02, img.shape), 0.0, 1.0)


def make_toy_dataset(out_dir, per_class: int, seed: int, size: int = 32, prefix: str = "toy",
                     taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY) -> Manifest:
    """Render ``per_class`` images for every class and write a real-source manifest."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    out_dir = Path(out_dir)
    records = []
    for ci, cid in enumerate(taxonomy.class_ids):
        for i in range(per_class):
            rng = np.random.default_rng([seed, ci, i])
            rel = f"images/{cid}/{prefix}-{i:05d}.png"
            save_png(render_toy_image(ci, rng, size, len(taxonomy)), out_dir / rel)
            records.append(ImageRecord(f"{prefix}-{cid}-{i:05d}", rel, cid, "real"))
    m = new_manifest(records, "make-toy", root=out_dir, taxonomy=taxonomy)
    return save_manifest(m, out_dir / MANIFEST_NAME)


def make_negatives(out_dir, n: int, seed: int, size: int = 32) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for i in range(n):
        p = out_dir / f"neg-{i:05d}.png"
        save_png(render_negative_image(np.random.default_rng([seed, 7919, i]), size), p)
        paths.append(p)
    return paths
