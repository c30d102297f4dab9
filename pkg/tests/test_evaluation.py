from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffaug.dataset import DEFAULT_TAXONOMY, new_manifest
from diffaug.errors import DataError, ValidationError
from diffaug.evaluation import (
    EvalReport,
    EvalRow,
    evaluate_scenarios,
    read_score_dump,
    render_report,
    top_k_accuracy,
    top_k_hits,
    write_report_files,
)

from conftest import CLASS_IDS, decode_class, pool, write_images

FIXTURE = Path(__file__).parent / "fixtures" / "reference_results.json"


def reference_results() -> EvalReport:
    return EvalReport.from_json(json.loads(FIXTURE.read_text()))


def oracle_hits(scores, labels, k):
    """Full sort of each vector (score descending, taxonomy index ascending), then membership."""
    hits = 0
    for row, lab in zip(scores, labels):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += CLASS_IDS.index(lab) in order[:k]
    return hits


def oracle_top_k(scores, labels, k):
    return oracle_hits(scores, labels, k) / len(labels)


# -- top-k -----------------------------------------------------------------------


def test_perfect_and_exhaustive():
    labels = [CLASS_IDS[i % 6] for i in range(12)]
    onehot = np.eye(6)[[i % 6 for i in range(12)]]
    assert all(top_k_accuracy(onehot, labels, k) == 1.0 for k in range(1, 7))
    rng = np.random.default_rng(0)
    assert top_k_accuracy(rng.random((12, 6)), labels, 6) == 1.0


def test_oracle_on_random_and_tied_scores():
    rng = np.random.default_rng(1)
    scores = rng.integers(0, 4, size=(500, 6)).astype(float)  # many ties
    labels = [CLASS_IDS[i] for i in rng.integers(0, 6, 500)]
    for k in range(1, 7):
        assert top_k_accuracy(scores, labels, k) == oracle_top_k(scores, labels, k)


def test_tie_break_prefers_lower_index():
    s = np.full((1, 6), 1 / 6)
    assert top_k_hits(s, [CLASS_IDS[0]], 1) == 1
    assert top_k_hits(s, [CLASS_IDS[1]], 1) == 0
    assert top_k_hits(s, [CLASS_IDS[1]], 2) == 1


def test_integer_labels_accepted():
    s = np.eye(6)
    assert top_k_hits(s, list(range(6)), 1) == 6


@pytest.mark.parametrize("scores, labels, k", [
    (np.ones((2, 6)), ["lentigo"], 1),
    (np.ones((0, 6)), [], 1),
    (np.ones((2, 5)), ["lentigo", "lentigo"], 1),
    (np.ones((1, 6)), ["lentigo"], 0),
    (np.ones((1, 6)), ["lentigo"], 7),
    (np.ones((1, 6)), ["eczema"], 1),
    (np.ones((1, 6)), [6], 1),
])
def test_top_k_errors(scores, labels, k):
    with pytest.raises(ValidationError):
        top_k_accuracy(scores, labels, k)


score_sets = st.integers(1, 25).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, 6), elements=st.floats(0, 1, allow_nan=False)),
    st.lists(st.integers(0, 5), min_size=n, max_size=n),
))


@settings(max_examples=60, deadline=None)
@given(score_sets, st.floats(0.01, 100), st.randoms(use_true_random=False))
def test_ranking_properties(data, scale, rnd):
    scores, labels = data
    accs = [top_k_accuracy(scores, labels, k) for k in range(1, 7)]
    assert all(a <= b for a, b in zip(accs, accs[1:])) and accs[-1] == 1.0
    perm = list(range(len(labels)))
    rnd.shuffle(perm)
    assert accs == [top_k_accuracy(scores[perm], [labels[i] for i in perm], k) for k in range(1, 7)]
    # scaling by a power of two is exact in floating point, so ties survive
    pow2 = 2.0 ** round(np.log2(scale))
    assert accs == [top_k_accuracy(scores * pow2, labels, k) for k in range(1, 7)]
    assert accs[0] == np.mean(np.argmax(scores, axis=1) == np.asarray(labels))
    assert accs == [oracle_top_k(scores, [CLASS_IDS[i] for i in labels], k) for k in range(1, 7)]


# -- report rows ------------------------------------------------------------------------


def test_row_invariants():
    with pytest.raises(ValidationError):
        EvalRow("x", 1, 0, [50.0, 40.0])
    with pytest.raises(ValidationError):
        EvalRow("x", 1, 0, [101.0])


def test_reference_results_csv_rows():
    csv = render_report(reference_results(), "csv")
    lines = csv.splitlines()
    assert lines[0] == "dataset,real,synthetic,top1,top2,top3,top4,top5"
    assert "synthetic,0,500,47.29,70.71,84.09,92.16,96.85" in lines
    assert "hybrid,250,250,54.13,73.23,85.01,92.16,96.65" in lines
    assert "real-small,250,0,53.41,73.51,83.22,89.75,95.45" in lines
    assert lines[2].endswith("500,0,54.05,73.95,84.84,91.49,96.96")


def test_reference_results_column_best_and_ties():
    rep = reference_results()
    best = rep.column_best()
    assert best == {1: ["hybrid"], 2: ["real"], 3: ["hybrid"], 4: ["hybrid", "synthetic"], 5: ["real"]}
    table = render_report(rep, "table")
    assert "ties: top-4: hybrid, synthetic" in table
    assert "47.29%" in table and "54.13%*" in table


def test_render_stable_and_empty():
    rep = reference_results()
    for fmt in ("table", "csv", "json"):
        assert render_report(rep, fmt) == render_report(reference_results(), fmt)
    empty = EvalReport([])
    assert render_report(empty, "csv") == "dataset,real,synthetic,top1,top2,top3,top4,top5\n"
    lines = render_report(empty, "table").splitlines()
    assert lines[0].startswith("Dataset") and len(lines) == 2
    assert EvalReport.from_json(json.loads(render_report(rep, "json"))).rows == rep.rows
    with pytest.raises(ValidationError):
        render_report(rep, "xml")


# -- evaluate_scenarios -------------------------------------------------------------------


class _Echo:
    def __init__(self, trained_on=None, noise=0):
        self.trained_on = trained_on or {}
        self.rng = np.random.default_rng(noise) if noise else None

    def __call__(self, imgs):
        out = np.eye(6)[decode_class(imgs)]
        if self.rng is not None:
            out = out * 0.2 + self.rng.dirichlet(np.ones(6), size=len(imgs)) * 0.8
        return out


@pytest.fixture(scope="module")
def test_set(tmp_path_factory):
    m = pool(5, "real", prefix="t", root=tmp_path_factory.mktemp("ev"))
    write_images(m)
    return m


def test_echo_is_perfect(test_set):
    rep, dumps = evaluate_scenarios({"real": _Echo({"per_class_real": 3})}, test_set)
    assert rep.rows[0].accuracy == [100.0] * 5 and rep.rows[0].real_per_class == 3
    assert dumps["real"].shape == (30, 6)


def test_overlap_is_rejected(test_set):
    ens = _Echo({"record_ids": [test_set.record_ids[4]]})
    with pytest.raises(DataError, match="overlaps"):
        evaluate_scenarios({"real": ens}, test_set)
    with pytest.raises(DataError):
        evaluate_scenarios({"real": _Echo()}, new_manifest([], "e"))


def test_rows_recomputable_from_dumps(tmp_path, test_set):
    ens = {"synthetic": _Echo(noise=2), "custom": _Echo(noise=3), "real": _Echo(noise=4)}
    rep, dumps = evaluate_scenarios(ens, test_set, ks=(1, 2, 3, 4, 5, 6))
    assert [r.scenario for r in rep.rows] == ["real", "synthetic", "custom"]
    write_report_files(tmp_path, rep, dumps, test_set)
    assert {p.name for p in tmp_path.iterdir()} == {"report.json", "report.csv", "report.txt", "scores"}
    for row in rep.rows:
        ids, labels, scores = read_score_dump(tmp_path / "scores" / f"{row.scenario}.csv")
        assert ids == test_set.record_ids
        assert np.array_equal(scores, dumps[row.scenario])
        assert row.accuracy == [100.0 * oracle_hits(scores, labels, k) / len(ids) for k in range(1, 7)]
        assert row.accuracy[-1] == 100.0
    header = (tmp_path / "scores" / "real.csv").read_text().splitlines()[0]
    assert header == "record_id,label,s1,s2,s3,s4,s5,s6"
