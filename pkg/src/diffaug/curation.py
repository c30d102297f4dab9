"""Classifier-gated curation of generated images.

Two filters run in a fixed order: a binary in-domain scorer, then a label
consistency check against a pretrained ensemble. Scorers are plain callables
``images (N, H, W, 3) float [0, 1] -> scores``; a domain scorer returns (N,)
in-domain probabilities, an ensemble returns (N, n_classes) probability rows.
Nothing is deleted from disk: filters only emit new manifests and decisions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dataset import Manifest, class_counts
from .errors import ConfigError, DataError, ValidationError
from .images import load_png

DEFAULT_THRESHOLD = 0.5
SUM_TOL = 1e-6
Scorer = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class FilterDecision:
    record_id: str
    stage: str
    accepted: bool
    score: float
    predicted_label: Optional[str] = None
    note: Optional[str] = None

    def __post_init__(self):
        if self.stage not in ("domain", "label"):
            raise ValidationError(f"unknown stage {self.stage!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"decision score {self.score} outside [0,1]")
        if self.stage == "label" and self.predicted_label is None:
            raise ValidationError("label decisions must carry predicted_label")

    def to_json(self) -> dict:
        return asdict(self)


def _batches(m: Manifest, batch_size: int):
    recs = m.records
    for i in range(0, len(recs), batch_size):
        yield recs[i:i + batch_size]


def domain_filter(m: Manifest, scorer: Scorer, threshold: float = DEFAULT_THRESHOLD,
                  batch_size: int = 256) -> tuple[Manifest, list[FilterDecision]]:
    """Keep records whose in-domain probability is >= ``threshold``.

    Unreadable images are rejected with score 0 and a note; the run continues.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold {threshold} outside [0,1]")
    kept, decisions = [], []
    for chunk in _batches(m, batch_size):
        imgs, ok, notes = [], [], {}
        for r in chunk:
            try:
                imgs.append(load_png(m.resolve(r)))
                ok.append(r)
            except DataError as e:
                notes[r.record_id] = str(e)
        scores = {}
        if ok:
            raw = np.asarray(scorer(np.stack(imgs)), dtype=np.float64).reshape(len(ok), -1)
            if raw.shape[1] != 1:
                raise ConfigError(f"domain scorer must return one probability per image, got shape {raw.shape}")
            for r, s in zip(ok, raw[:, 0]):
                if not (0.0 <= s <= 1.0):
                    raise ConfigError(f"domain scorer returned {s} for {r.record_id}; expected a probability")
                scores[r.record_id] = float(s)
        for r in chunk:
            s = scores.get(r.record_id, 0.0)
            accepted = r.record_id in scores and s >= threshold
            decisions.append(FilterDecision(r.record_id, "domain", accepted, s, note=notes.get(r.record_id)))
            if accepted:
                kept.append(r.with_scores(domain_score=s))
    return m.derive("filter-domain", kept), decisions


def label_filter(m: Manifest, ensemble: Scorer, batch_size: int = 256) -> tuple[Manifest, list[FilterDecision]]:
    """Keep records whose top-1 ensemble prediction equals their assigned label.

    Ties go to the class listed first in the taxonomy.
    """
    ids = m.taxonomy.class_ids
    kept, decisions = [], []
    for chunk in _batches(m, batch_size):
        imgs = np.stack([load_png(m.resolve(r)) for r in chunk])
        scores = np.asarray(ensemble(imgs), dtype=np.float64)
        if scores.shape != (len(chunk), len(ids)):
            raise ConfigError(f"ensemble returned shape {scores.shape}, expected {(len(chunk), len(ids))}")
        sums = scores.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > SUM_TOL) or np.any(scores < 0):
            raise ConfigError("ensemble score vectors must be non-negative and sum to 1")
        pred = scores.argmax(axis=1)  # first maximum == lowest taxonomy index
        for r, row, p in zip(chunk, scores, pred):
            conf = float(min(1.0, row[p]))
            accepted = ids[p] == r.label
            decisions.append(FilterDecision(r.record_id, "label", bool(accepted), conf, ids[p]))
            rec = r.with_scores(predicted_label=ids[p], label_confidence=conf)
            if accepted:
                kept.append(rec)
    return m.derive("filter-label", kept), decisions


@dataclass
class CurationReport:
    """Per-class accounting of both stages. Rates are None when a stage saw no input."""

    input_counts: dict
    domain_accepted: dict
    label_accepted: dict
    domain_rate: Optional[float]
    label_rate: Optional[float]
    overall_rate: Optional[float]
    threshold: float
    decisions: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("decisions")
        d["totals"] = {
            "input": sum(self.input_counts.values()),
            "domain_accepted": sum(self.domain_accepted.values()),
            "label_accepted": sum(self.label_accepted.values()),
        }
        return d


def _rate(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def curate(generated: Manifest, scorer: Scorer, ensemble: Scorer,
           threshold: float = DEFAULT_THRESHOLD) -> tuple[Manifest, CurationReport]:
    after_domain, d_dec = domain_filter(generated, scorer, threshold)
    after_label, l_dec = label_filter(after_domain, ensemble)
    n_in, n_dom, n_lab = len(generated), len(after_domain), len(after_label)
    report = CurationReport(
        input_counts=class_counts(generated),
        domain_accepted=class_counts(after_domain),
        label_accepted=class_counts(after_label),
        domain_rate=_rate(n_dom, n_in),
        label_rate=_rate(n_lab, n_dom),
        overall_rate=_rate(n_lab, n_in),
        threshold=threshold,
        decisions=d_dec + l_dec,
    )
    return after_label, report


def write_decisions(decisions, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for d in decisions:
            f.write(json.dumps(d.to_json(), separators=(",", ":")) + "\n")


def read_decisions(path) -> list[FilterDecision]:
    with Path(path).open(encoding="utf-8") as f:
        return [FilterDecision(**json.loads(line)) for line in f if line.strip()]


def write_report(report: CurationReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def report_from_manifests(generated: Manifest, after_domain: Manifest, after_label: Manifest,
                          threshold: float) -> CurationReport:
    n_in, n_dom, n_lab = len(generated), len(after_domain), len(after_label)
    return CurationReport(class_counts(generated), class_counts(after_domain), class_counts(after_label),
                          _rate(n_dom, n_in), _rate(n_lab, n_dom), _rate(n_lab, n_in), threshold)
