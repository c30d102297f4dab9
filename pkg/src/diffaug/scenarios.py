"""Balanced real / hybrid / synthetic training mixes drawn from curated pools."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .dataset import Manifest, by_class, class_counts, keyed_order, save_manifest
from .errors import ConfigError, DataError

STANDARD_NAMES = ("real-small", "real", "hybrid", "synthetic")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    per_class_real: int
    per_class_synthetic: int
    seed: int = 0

    def __post_init__(self):
        if self.per_class_real < 0 or self.per_class_synthetic < 0:
            raise ConfigError(f"scenario {self.name!r}: counts must be >= 0")


def standard_specs(n: int, seed: int = 0) -> list[ScenarioSpec]:
    if n < 0 or n % 2:
        raise ConfigError(f"base count must be a non-negative even number, got {n}")
    h = n // 2
    return [
        ScenarioSpec("real-small", h, 0, seed),
        ScenarioSpec("real", n, 0, seed),
        ScenarioSpec("hybrid", h, h, seed),
        ScenarioSpec("synthetic", 0, n, seed),
    ]


# Per-class counts of the four mixes at the original (500 per class) scale.
REFERENCE_SCENARIOS = standard_specs(500)


def _ordering_key(spec: ScenarioSpec, source: str, pairing: bool) -> str:
    # a shared key across specs nests smaller draws inside larger ones
    return f"scenario:{spec.seed}:{source}" if pairing else f"scenario:{spec.seed}:{source}:{spec.name}"


def _rebase(m: Manifest, rec, root: Optional[Path]):
    if root is None or m.root is None:
        return rec
    p = os.path.relpath(os.path.join(m.root, rec.image_path), root)
    return replace(rec, image_path=Path(p).as_posix())


def build_scenario(spec: ScenarioSpec, real: Manifest, synthetic: Optional[Manifest],
                   pairing: bool = True) -> Manifest:
    """Sample ``spec``'s per-class counts without replacement from the two pools.

    The output is rooted at ``real.root``; synthetic image paths are rebased onto it.
    """
    if spec.per_class_synthetic > 0:
        if synthetic is None:
            raise DataError(f"scenario {spec.name!r} needs a synthetic pool")
        if "filter-label" not in synthetic.stages:
            raise DataError(f"scenario {spec.name!r}: synthetic pool was not curated "
                            f"(created_by={synthetic.created_by!r})")
        if synthetic.taxonomy != real.taxonomy:
            raise DataError("real and synthetic pools use different taxonomies")
    pools = [("real", real, spec.per_class_real)]
    if synthetic is not None:
        pools.append(("synthetic", synthetic, spec.per_class_synthetic))
    root = real.root
    records = []
    for cid in real.taxonomy.class_ids:
        for source, pool, need in pools:
            if need == 0:
                continue
            avail = [r for r in by_class(pool)[cid] if r.source == source]
            if len(avail) < need:
                raise DataError(f"scenario {spec.name!r}: class {cid!r} has {len(avail)} {source} "
                                f"records, needs {need} (short by {need - len(avail)})")
            chosen = keyed_order(avail, _ordering_key(spec, source, pairing))[:need]
            records.extend(replace(_rebase(pool, r, root), split=None) for r in chosen)
    parent = real.digest() + ("+" + synthetic.digest() if synthetic is not None else "")
    return Manifest(real.taxonomy, tuple(records), f"scenario:{spec.name}", parent, root=root)


def standard_suite(n: int, real: Manifest, synthetic: Manifest, seed: int = 0,
                   pairing: bool = True) -> dict[str, Manifest]:
    """real-small (n/2 real), real (n), hybrid (n/2 + n/2), synthetic (n), per class."""
    return {s.name: build_scenario(s, real, synthetic, pairing) for s in standard_specs(n, seed)}


def suite_summary(suite: dict[str, Manifest], base_count: int, seed: int, pairing: bool) -> dict:
    out = {"base_count": base_count, "seed": seed, "pairing": pairing, "scenarios": {}}
    for name, m in suite.items():
        real = class_counts(m, "real")
        syn = class_counts(m, "synthetic")
        out["scenarios"][name] = {
            "records": len(m),
            "per_class_real": real,
            "per_class_synthetic": syn,
            "digest": m.digest(),
        }
    return out


def write_suite(suite: dict[str, Manifest], out_dir, base_count: int, seed: int, pairing: bool) -> dict:
    out_dir = Path(out_dir)
    saved = {name: save_manifest(m, out_dir / f"{name}.jsonl") for name, m in suite.items()}
    summary = suite_summary(saved, base_count, seed, pairing)
    (out_dir / "suite.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
