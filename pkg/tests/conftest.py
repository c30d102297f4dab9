from __future__ import annotations

import numpy as np
import pytest

from diffaug.dataset import DEFAULT_TAXONOMY, ImageRecord, new_manifest
from diffaug.images import save_png

CLASS_IDS = DEFAULT_TAXONOMY.class_ids


def real_record(cid: str, i: int, prefix: str = "r") -> ImageRecord:
    return ImageRecord(f"{prefix}-{cid}-{i:04d}", f"images/{cid}/{prefix}{i:04d}.png", cid, "real")


def synthetic_record(cid: str, i: int, prefix: str = "g") -> ImageRecord:
    return ImageRecord(
        f"{prefix}-{cid}-{i:04d}",
        f"gen/{cid}/{i:05d}.png",
        cid,
        "synthetic",
        provenance={"generator_run_id": prefix, "seed": i, "prompt": cid, "sampler_steps": 10},
    )


def pool(per_class: int, source: str = "real", created_by: str = "fixture", prefix=None, root=None):
    make = real_record if source == "real" else synthetic_record
    recs = [make(c, i, prefix or source[0]) for c in CLASS_IDS for i in range(per_class)]
    return new_manifest(recs, created_by, root=root)


def coded_image(class_idx: int, value: float = 0.5, size: int = 8) -> np.ndarray:
    """Image whose first pixel encodes a class index, used by stub scorers."""
    img = np.full((size, size, 3), value, dtype=np.float64)
    img[0, 0, 0] = class_idx / 10.0
    return img


def decode_class(imgs: np.ndarray) -> np.ndarray:
    return np.rint(imgs[:, 0, 0, 0] * 10).astype(int)


def write_images(manifest, values=None, size: int = 8):
    """Render a coded PNG for every record; ``values`` maps record_id -> fill value."""
    for r in manifest.records:
        v = (values or {}).get(r.record_id, 0.5)
        save_png(coded_image(CLASS_IDS.index(r.label), v, size), manifest.resolve(r))


@pytest.fixture
def real_pool():
    return pool


# -- curation stub -----------------------------------------------------------
# Each generated record carries a level k in 0..255 written into its image fill,
# so the stub scorers below read back exactly what the oracles compute from k.


def stub_levels(per_class: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return {f"g-{c}-{i:04d}": (ci, int(rng.integers(0, 256))) for ci, c in enumerate(CLASS_IDS)
            for i in range(per_class)}


def stub_vector(c: int, k: int) -> list:
    v = [1.0] * 6
    v[c] += k % 4
    v[(c + 1) % 6] += k % 5
    s = sum(v)
    return [x / s for x in v]


def stub_domain_scorer(imgs):
    return np.rint(imgs[:, 1, 1, 1] * 255) / 255.0


def stub_ensemble(imgs):
    ks = np.rint(imgs[:, 1, 1, 1] * 255).astype(int)
    return np.array([stub_vector(c, k) for c, k in zip(decode_class(imgs), ks)])


def stub_generated(root, per_class: int = 100, seed: int = 0):
    levels = stub_levels(per_class, seed)
    m = pool(per_class, "synthetic", created_by="generate", prefix="g", root=root)
    write_images(m, {rid: k / 255.0 for rid, (_, k) in levels.items()})
    return m, levels


# Reduced reproduce-toy settings shared by the CLI tests and the determinism criterion.
FAST_TOY = {"per_class": 200, "test_per_class": 20, "negatives": 100, "generate_per_class": 80,
            "base_count": 10, "generator": {"steps": 1500}}
FAST_TOY_ARGS = ["--per-class", "200", "--test-per-class", "20", "--negatives", "100",
                 "--generate-per-class", "80", "--base-count", "10", "--generator-steps", "1500"]


# -- acceptance summary ----------------------------------------------------------
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
