"""Class taxonomy, image records and JSONL manifests.

A manifest file is UTF-8 text: one header object on the first line, then one
record object per line. Image paths are stored relative to the directory
holding the manifest file and are never opened here.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

from .errors import DataError, ManifestParseError, ValidationError

FORMAT_VERSION = 1
CATEGORIES = ("benign", "pre-malignant", "malignant")
SOURCES = ("real", "synthetic")
SPLITS = ("train", "val", "test")
STAGE_SEP = ">"

_RECORD_FIELDS = (
    "record_id",
    "image_path",
    "label",
    "source",
    "split",
    "provenance",
    "filter_scores",
)
_HEADER_FIELDS = ("format_version", "taxonomy", "created_by", "parent")
_GENERATOR_KEYS = ("generator_run_id", "sampler_steps")


# ---------------------------------------------------------------------------
# Taxonomy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaxonClass:
    class_id: str
    display_name: str
    category: str


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered class list. Position in ``classes`` is the global tie-break order."""

    classes: tuple[TaxonClass, ...]

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if not ids:
            raise ValidationError("taxonomy has no classes")
        if any(not i for i in ids):
            raise ValidationError("taxonomy class_id must be non-empty")
        dup = [i for i, n in Counter(ids).items() if n > 1]
        if dup:
            raise ValidationError(f"duplicate class_id in taxonomy: {dup}")
        for c in self.classes:
            if c.category not in CATEGORIES:
                raise ValidationError(f"class {c.class_id!r}: unknown category {c.category!r}")

    @property
    def class_ids(self) -> list[str]:
        return [c.class_id for c in self.classes]

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, class_id: object) -> bool:
        return any(c.class_id == class_id for c in self.classes)

    def index(self, class_id: str) -> int:
        for i, c in enumerate(self.classes):
            if c.class_id == class_id:
                return i
        raise ValidationError(f"unknown class {class_id!r}")

    def get(self, class_id: str) -> TaxonClass:
        return self.classes[self.index(class_id)]

    def to_json(self) -> list[dict]:
        return [
            {"class_id": c.class_id, "display_name": c.display_name, "category": c.category}
            for c in self.classes
        ]

    @classmethod
    def from_json(cls, items: Sequence[Mapping[str, str]]) -> "ClassTaxonomy":
        try:
            return cls(tuple(TaxonClass(i["class_id"], i["display_name"], i["category"]) for i in items))
        except (KeyError, TypeError) as e:
            raise ValidationError(f"malformed taxonomy entry: {e}") from None


DEFAULT_TAXONOMY = ClassTaxonomy(
    (
        TaxonClass("seborrheic_keratosis", "Seborrheic keratosis", "benign"),
        TaxonClass("lentigo", "Lentigo", "benign"),
        TaxonClass("actinic_keratosis", "Actinic keratosis", "pre-malignant"),
        TaxonClass("atypical_melanocytic_nevus", "Atypical melanocytic nevus", "pre-malignant"),
        TaxonClass("basal_cell_carcinoma", "Basal cell carcinoma", "malignant"),
        TaxonClass("melanoma", "Melanoma", "malignant"),
    )
)

# Per-class image counts of the original clinical data, used as fixtures.
REFERENCE_TRAIN_COUNTS = {
    "seborrheic_keratosis": 2134,
    "lentigo": 680,
    "actinic_keratosis": 3298,
    "atypical_melanocytic_nevus": 623,
    "basal_cell_carcinoma": 7081,
    "melanoma": 3381,
}
REFERENCE_TEST_COUNTS = {
    "seborrheic_keratosis": 1597,
    "lentigo": 293,
    "actinic_keratosis": 282,
    "atypical_melanocytic_nevus": 885,
    "basal_cell_carcinoma": 345,
    "melanoma": 180,
}


# ---------------------------------------------------------------------------
# Records and manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageRecord:
    record_id: str
    image_path: str
    label: str
    source: str
    split: Optional[str] = None
    provenance: Optional[dict] = None
    filter_scores: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in _RECORD_FIELDS}
        for k in sorted(self.extra):
            d[k] = self.extra[k]
        return d

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ImageRecord":
        missing = [k for k in ("record_id", "image_path", "label", "source") if k not in obj]
        if missing:
            raise ValidationError(f"record missing fields {missing}")
        extra = {k: v for k, v in obj.items() if k not in _RECORD_FIELDS}
        return cls(**{k: obj.get(k) for k in _RECORD_FIELDS}, extra=extra)

    def with_scores(self, **scores) -> "ImageRecord":
        merged = dict(self.filter_scores or {})
        merged.update(scores)
        return replace(self, filter_scores=merged)


def _check_probability(name: str, value, record_id: str) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not 0.0 <= value <= 1.0:
        raise ValidationError(f"record {record_id!r}: {name}={value!r} is not a probability in [0,1]")


def validate_record(rec: ImageRecord, taxonomy: ClassTaxonomy) -> None:
    rid = rec.record_id
    if not isinstance(rid, str) or not rid:
        raise ValidationError("record_id must be a non-empty string")
    if not isinstance(rec.image_path, str) or not rec.image_path:
        raise ValidationError(f"record {rid!r}: image_path must be a non-empty string")
    if rec.label not in taxonomy:
        raise ValidationError(f"record {rid!r}: unknown label {rec.label!r}")
    if rec.source not in SOURCES:
        raise ValidationError(f"record {rid!r}: source must be one of {SOURCES}")
    if rec.split is not None and rec.split not in SPLITS:
        raise ValidationError(f"record {rid!r}: split must be one of {SPLITS} or null")
    prov = rec.provenance
    if prov is not None and not isinstance(prov, dict):
        raise ValidationError(f"record {rid!r}: provenance must be an object")
    if rec.source == "synthetic" and not prov:
        raise ValidationError(f"record {rid!r}: synthetic record without provenance")
    if rec.source == "real" and prov and any(k in prov for k in _GENERATOR_KEYS):
        raise ValidationError(f"record {rid!r}: real record carries generator provenance")
    fs = rec.filter_scores
    if fs is not None:
        if not isinstance(fs, dict):
            raise ValidationError(f"record {rid!r}: filter_scores must be an object")
        for key in ("domain_score", "label_confidence"):
            if fs.get(key) is not None:
                _check_probability(key, fs[key], rid)
        if fs.get("predicted_label") is not None and fs["predicted_label"] not in taxonomy:
            raise ValidationError(f"record {rid!r}: unknown predicted_label {fs['predicted_label']!r}")


@dataclass(frozen=True)
class Manifest:
    """Immutable collection of records. ``root`` is where relative image paths resolve."""

    taxonomy: ClassTaxonomy
    records: tuple[ImageRecord, ...]
    created_by: str
    parent: Optional[str] = None
    extra: dict = field(default_factory=dict)
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        self.validate()

    def validate(self) -> None:
        seen = set()
        for rec in self.records:
            validate_record(rec, self.taxonomy)
            if rec.record_id in seen:
                raise ValidationError(f"duplicate record_id {rec.record_id!r}")
            seen.add(rec.record_id)
        if self.parent is not None and self.parent == self.digest():
            raise ValidationError("manifest lists itself as parent")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def stages(self) -> list[str]:
        return self.created_by.split(STAGE_SEP)

    @property
    def record_ids(self) -> list[str]:
        return [r.record_id for r in self.records]

    def resolve(self, rec: ImageRecord) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / rec.image_path

    def derive(self, stage: str, records: Iterable[ImageRecord], chain: bool = True) -> "Manifest":
        """Copy-on-write child manifest; ``stage`` is appended to the creation chain."""
        created = f"{self.created_by}{STAGE_SEP}{stage}" if chain else stage
        return Manifest(self.taxonomy, tuple(records), created, self.digest(), root=self.root)

    def header(self) -> dict:
        h = {
            "format_version": FORMAT_VERSION,
            "taxonomy": self.taxonomy.to_json(),
            "created_by": self.created_by,
            "parent": self.parent,
        }
        for k in sorted(self.extra):
            h[k] = self.extra[k]
        return h

    def to_lines(self) -> list[str]:
        dump = lambda o: json.dumps(o, ensure_ascii=False, sort_keys=False, separators=(",", ":"))
        return [dump(self.header())] + [dump(r.to_json()) for r in self.records]

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.to_lines():
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


def new_manifest(records: Iterable[ImageRecord], created_by: str, root=None,
                 taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY, parent: Optional[str] = None) -> Manifest:
    return Manifest(taxonomy, tuple(records), created_by, parent, root=Path(root) if root else None)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ManifestParseError(path, 1, "missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestParseError(path, 1, f"malformed header: {e.msg}") from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise ManifestParseError(path, 1, f"header must be an object with format_version={FORMAT_VERSION}")
    taxonomy = ClassTaxonomy.from_json(header.get("taxonomy") or [])
    records = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestParseError(path, no, f"malformed record: {e.msg}") from None
        if not isinstance(obj, dict):
            raise ManifestParseError(path, no, "record is not an object")
        try:
            records.append(ImageRecord.from_json(obj))
        except (ValidationError, TypeError) as e:
            raise ManifestParseError(path, no, str(e)) from None
    extra = {k: v for k, v in header.items() if k not in _HEADER_FIELDS}
    created_by = header.get("created_by")
    if not isinstance(created_by, str):
        raise ManifestParseError(path, 1, "header created_by must be a string")
    return Manifest(taxonomy, tuple(records), created_by, header.get("parent"), extra, root=path.parent)


def save_manifest(m: Manifest, path) -> Manifest:
    """Write ``m`` to ``path``; image paths are rebased onto the file's directory.

    Returns the manifest as it now lives on disk (rooted at ``path.parent``).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = m
    if m.root is not None and Path(os.path.abspath(m.root)) != Path(os.path.abspath(path.parent)):
        rebased = []
        for r in m.records:
            p = os.path.relpath(os.path.join(m.root, r.image_path), path.parent)
            rebased.append(replace(r, image_path=Path(p).as_posix()))
        out = replace(m, records=tuple(rebased))
    out = replace(out, root=path.parent)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as f:
        for line in out.to_lines():
            f.write(line + "\n")
    os.replace(tmp, path)
    return out


# ---------------------------------------------------------------------------
# Counting, ordering, splitting
# ---------------------------------------------------------------------------


def class_counts(m: Manifest, source_filter: Optional[str] = None) -> dict[str, int]:
    if source_filter is not None and source_filter not in SOURCES:
        raise ValidationError(f"source_filter must be one of {SOURCES}")
    counts = {c: 0 for c in m.taxonomy.class_ids}
    for r in m.records:
        if source_filter is None or r.source == source_filter:
            counts[r.label] += 1
    return counts


def keyed_rank(seed, record_id: str) -> bytes:
    """Sort key for seeded, order-independent shuffling of records."""
    return hashlib.blake2b(f"{seed}\x00{record_id}".encode("utf-8"), digest_size=16).digest()


def keyed_order(records: Iterable[ImageRecord], seed) -> list[ImageRecord]:
    return sorted(records, key=lambda r: (keyed_rank(seed, r.record_id), r.record_id))


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def by_class(m: Manifest) -> dict[str, list[ImageRecord]]:
    groups: dict[str, list[ImageRecord]] = {c: [] for c in m.taxonomy.class_ids}
    for r in m.records:
        groups[r.label].append(r)
    return groups


def stratified_split(m: Manifest, fractions=(0.8, 0.2), seed: int = 0) -> Manifest:
    """Assign ``split`` train/val per class: train = round-half-up(frac * n).

    Assignment depends only on (seed, record_ids), never on record order.
    """
    train_frac, val_frac = (Fraction(str(f)) for f in fractions)
    if train_frac < 0 or val_frac < 0 or train_frac + val_frac != 1:
        raise ValidationError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    assignment = {}
    for cid, recs in by_class(m).items():
        if not recs:
            continue
        if len(recs) < 2:
            raise ValidationError(f"class {cid!r} has {len(recs)} record(s); need at least 2 to split")
        n_train = round_half_up(train_frac * len(recs))
        for i, r in enumerate(keyed_order(recs, f"split:{seed}")):
            assignment[r.record_id] = "train" if i < n_train else "val"
    records = [replace(r, split=assignment[r.record_id]) for r in m.records]
    return m.derive("split", records)


def select_split(m: Manifest, split: str) -> Manifest:
    return m.derive(f"select:{split}", [r for r in m.records if r.split == split])
