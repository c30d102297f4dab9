"""Top-k accuracy and the scenario comparison report.

Ranking ties go to the class listed first in the taxonomy, the same rule the
label filter uses. Accuracies accumulate as integer counts and are divided once.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataset import DEFAULT_TAXONOMY, ClassTaxonomy, Manifest
from .errors import DataError, ValidationError
from .images import load_manifest_images
from .scenarios import STANDARD_NAMES

REPORT_KS = (1, 2, 3, 4, 5)


def _label_indices(labels, taxonomy: ClassTaxonomy) -> np.ndarray:
    out = []
    for lab in labels:
        if isinstance(lab, (int, np.integer)):
            if not 0 <= lab < len(taxonomy):
                raise ValidationError(f"label index {lab} out of range")
            out.append(int(lab))
        else:
            out.append(taxonomy.index(lab))
    return np.asarray(out, dtype=np.int64)


def top_k_hits(scores, labels, k: int, taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY) -> int:
    """Number of items whose true class is among the k best-ranked classes."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != len(labels):
        raise ValidationError(f"{scores.shape[0] if scores.ndim else 0} score vectors vs {len(labels)} labels")
    if scores.shape[0] == 0:
        raise ValidationError("no predictions to score")
    n_classes = scores.shape[1]
    if n_classes != len(taxonomy):
        raise ValidationError(f"score vectors have {n_classes} entries, taxonomy has {len(taxonomy)}")
    if not 1 <= k <= n_classes:
        raise ValidationError(f"k={k} outside 1..{n_classes}")
    y = _label_indices(labels, taxonomy)
    true = scores[np.arange(len(y)), y][:, None]
    cols = np.arange(n_classes)[None, :]
    # classes ranked ahead of the true one: strictly higher, or equal with a lower index
    ahead = (scores > true) | ((scores == true) & (cols < y[:, None]))
    return int((ahead.sum(axis=1) < k).sum())


def top_k_accuracy(scores, labels, k: int, taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY) -> float:
    return top_k_hits(scores, labels, k, taxonomy) / len(labels)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    scenario: str
    real_per_class: int
    synthetic_per_class: int
    accuracy: list  # percentages, one per k in the report's ``ks``

    def __post_init__(self):
        if any(not 0.0 <= a <= 100.0 for a in self.accuracy):
            raise ValidationError(f"{self.scenario}: accuracy outside [0, 100]")
        if any(b < a for a, b in zip(self.accuracy, self.accuracy[1:])):
            raise ValidationError(f"{self.scenario}: top-k accuracy decreases in k")


@dataclass
class EvalReport:
    rows: list
    test_set: str = ""
    ks: tuple = REPORT_KS
    config: dict = field(default_factory=dict)

    def column_best(self) -> dict[int, list[str]]:
        """For every k, the scenarios reaching the column maximum (more than one = tie)."""
        best = {}
        for j, k in enumerate(self.ks):
            if not self.rows:
                best[k] = []
                continue
            top = max(r.accuracy[j] for r in self.rows)
            best[k] = [r.scenario for r in self.rows if _fmt(r.accuracy[j]) == _fmt(top)]
        return best

    def to_json(self) -> dict:
        return {
            "test_set": self.test_set,
            "ks": list(self.ks),
            "rows": [asdict(r) for r in self.rows],
            "column_best": {str(k): v for k, v in self.column_best().items()},
            "config": self.config,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls([EvalRow(**r) for r in d["rows"]], d.get("test_set", ""), tuple(d.get("ks", REPORT_KS)),
                   d.get("config", {}))


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _scenario_order(names) -> list[str]:
    std = [n for n in STANDARD_NAMES if n in names]
    return std + sorted(n for n in names if n not in STANDARD_NAMES)


def score_matrix(ensemble, test: Manifest, image_size: Optional[int] = None) -> np.ndarray:
    return np.asarray(ensemble(load_manifest_images(test, image_size)), dtype=np.float64)


def evaluate_scenarios(ensembles: Mapping[str, object], test: Manifest, ks: Sequence[int] = REPORT_KS,
                       config: Optional[dict] = None) -> tuple[EvalReport, dict[str, np.ndarray]]:
    """Score every ensemble on the full test manifest.

    Returns the report and the per-scenario (N, n_classes) score matrices it was built from.
    """
    if len(test) == 0:
        raise DataError("test manifest is empty")
    test_ids = set(test.record_ids)
    images = load_manifest_images(test)
    labels = [r.label for r in test.records]
    rows, dumps = [], {}
    for name in _scenario_order(list(ensembles)):
        ens = ensembles[name]
        trained = getattr(ens, "trained_on", {}) or {}
        overlap = test_ids.intersection(trained.get("record_ids", ()))
        if overlap:
            raise DataError(f"test set overlaps the {name!r} training data ({len(overlap)} records, "
                            f"e.g. {sorted(overlap)[0]!r})")
        scores = np.asarray(ens(images), dtype=np.float64)
        dumps[name] = scores
        acc = [100.0 * top_k_hits(scores, labels, k, test.taxonomy) / len(labels) for k in ks]
        rows.append(EvalRow(name, trained.get("per_class_real", 0), trained.get("per_class_synthetic", 0), acc))
    return EvalReport(rows, test.digest(), tuple(ks), config or {}), dumps


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render_report(report: EvalReport, fmt: str = "table") -> str:
    """``fmt`` is "table", "csv" or "json"; output is byte-stable for equal reports."""
    ks = list(report.ks)
    if fmt == "json":
        return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        header = ["dataset", "real", "synthetic"] + [f"top{k}" for k in ks]
        rows = [[r.scenario, r.real_per_class, r.synthetic_per_class] + [_fmt(a) for a in r.accuracy]
                for r in report.rows]
        return _csv_text(header, rows)
    if fmt != "table":
        raise ValidationError(f"unknown report format {fmt!r}")
    best = report.column_best()
    header = ["Dataset", "Real", "Synthetic"] + [f"Top-{k}" for k in ks]
    body = []
    for r in report.rows:
        cells = [r.scenario, str(r.real_per_class), str(r.synthetic_per_class)]
        for j, k in enumerate(ks):
            mark = "*" if r.scenario in best[k] else " "
            cells.append(f"{_fmt(r.accuracy[j])}%{mark}")
        body.append(cells)
    widths = [max(len(x) for x in col) for col in zip(header, *body)] if body else [len(h) for h in header]
    line = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    out = [line(header), "  ".join("-" * w for w in widths)] + [line(c) for c in body]
    ties = [f"top-{k}: {', '.join(v)}" for k, v in best.items() if len(v) > 1]
    if body:
        out.append("* column maximum" + (f" (ties: {'; '.join(ties)})" if ties else ""))
    return "\n".join(out) + "\n"


def write_score_dump(path, test: Manifest, scores: np.ndarray) -> None:
    header = ["record_id", "label"] + [f"s{i + 1}" for i in range(scores.shape[1])]
    rows = [[r.record_id, r.label] + [repr(float(v)) for v in row] for r, row in zip(test.records, scores)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(_csv_text(header, rows), encoding="utf-8")


def read_score_dump(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))[1:]
    ids = [r[0] for r in rows]
    labels = [r[1] for r in rows]
    return ids, labels, np.array([[float(v) for v in r[2:]] for r in rows])


def write_report_files(out_dir, report: EvalReport, dumps: Mapping[str, np.ndarray], test: Manifest) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(render_report(report, "json"), encoding="utf-8")
    (out_dir / "report.csv").write_text(render_report(report, "csv"), encoding="utf-8")
    (out_dir / "report.txt").write_text(render_report(report, "table"), encoding="utf-8")
    for name, scores in dumps.items():
        write_score_dump(out_dir / "scores" / f"{name}.csv", test, scores)
