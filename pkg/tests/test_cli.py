from __future__ import annotations

import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest
import torch

from diffaug import cli, pipeline
from diffaug.dataset import class_counts, load_manifest
from diffaug.errors import ConfigError
from diffaug.training import TrainConfig, train_member

from conftest import CLASS_IDS, FAST_TOY, FAST_TOY_ARGS

SUBCOMMANDS = ["make-toy", "train-generator", "train-embeddings", "generate", "filter-domain", "filter-label",
               "augment", "scenario", "train", "evaluate", "report", "run", "reproduce-toy"]


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): _sha(p) for p in sorted(root.rglob("*")) if p.is_file()}


def _write(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


# -- parser ---------------------------------------------------------------------------


def test_every_subcommand_help_lists_its_flags(capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert sorted(sub.choices) == sorted(SUBCOMMANDS)
    for name, sp in sub.choices.items():
        with pytest.raises(SystemExit) as ei:
            cli.main([name, "--help"])
        assert ei.value.code == 0
        out = capsys.readouterr().out
        for action in sp._actions:
            for flag in action.option_strings:
                assert flag in out, (name, flag)


def test_unknown_flag_is_an_error(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["make-toy", "--out", "x", "--colour", "red"])
    assert ei.value.code == 2
    assert "unrecognized" in capsys.readouterr().err


def test_console_script_installed(tmp_path):
    exe = shutil.which("diffaug")
    assert exe is not None
    r = subprocess.run([exe, "make-toy", "--out", str(tmp_path / "t"), "--per-class", "1", "--size", "8"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "wrote 6 images" in r.stdout
    r = subprocess.run([sys.executable, "-m", "diffaug.cli", "report", "--in", str(tmp_path / "none.json")],
                       capture_output=True, text=True)
    assert r.returncode == 5


# -- make-toy ---------------------------------------------------------------------------


def test_make_toy_one_per_class(tmp_path):
    assert cli.main(["make-toy", "--out", str(tmp_path), "--per-class", "1", "--size", "16"]) == 0
    m = load_manifest(tmp_path / "manifest.jsonl")
    assert class_counts(m, "real") == {c: 1 for c in CLASS_IDS}
    assert len(list((tmp_path / "images").rglob("*.png"))) == 6


def test_make_toy_deterministic(tmp_path):
    for d in ("a", "b"):
        cli.main(["make-toy", "--out", str(tmp_path / d), "--per-class", "200", "--size", "16", "--seed", "4",
                  "--negatives", "5"])
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    cli.main(["make-toy", "--out", str(tmp_path / "c"), "--per-class", "2", "--size", "16", "--seed", "5"])
    a2 = {k: v for k, v in _tree(tmp_path / "a").items() if k.startswith("images/") and k.endswith("-00000.png")}
    c2 = {k: v for k, v in _tree(tmp_path / "c").items() if k.startswith("images/") and k.endswith("-00000.png")}
    assert a2.keys() == c2.keys() and a2 != c2


def test_toy_classes_are_separable(tmp_path):
    # separability oracle: one compact CNN on an 80/20 split of 200 images per class
    cli.main(["make-toy", "--out", str(tmp_path), "--per-class", "200", "--size", "16", "--seed", "9"])
    m = load_manifest(tmp_path / "manifest.jsonl")
    cfg = TrainConfig(epochs=15, batch_size=32, patience=5, image_size=16, seed=9)
    _, hist = train_member("compact_cnn", m, cfg)
    best = hist.epochs[hist.best_epoch - 1]["val_accuracy"]
    print(f"toy separability: held-out top-1 {best:.3f}")
    assert best >= 0.90


# -- exit codes -----------------------------------------------------------------------------


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    bad = _write(tmp_path / "bad.json", {"real_manifest": "r", "test_manifest": "t", "negatives_dir": "n",
                                         "colour": "red"})
    assert cli.main(["run", "--config", str(bad)]) == 2
    cfg = _write(tmp_path / "ok.json", {"real_manifest": "nowhere/real.jsonl", "test_manifest": "t.jsonl",
                                        "negatives_dir": "neg"})
    capsys.readouterr()
    assert cli.main(["run", "--config", str(cfg)]) == 3
    assert "nowhere/real.jsonl" in capsys.readouterr().err
    (tmp_path / "broken.jsonl").write_text("{oops\n")
    assert cli.main(["train", "--scenario", str(tmp_path / "broken.jsonl"), "--out", str(tmp_path / "o")]) == 3
    assert cli.main(["train", "--scenario", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "o")]) == 3
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["make-toy", "--out", str(blocker / "sub"), "--per-class", "1", "--size", "8"]) == 5
    assert cli.main(["--workers", "0", "make-toy", "--out", str(tmp_path / "w")]) == 2


def test_divergence_exit_code(tmp_path):
    cli.main(["make-toy", "--out", str(tmp_path / "toy"), "--per-class", "4", "--size", "8"])
    cfg = _write(tmp_path / "g.json", {"steps": 4, "lr": 1e30, "image_size": 8, "base_channels": 8,
                                       "timesteps": 10, "batch_size": 8})
    rc = cli.main(["train-generator", "--real", str(tmp_path / "toy" / "manifest.jsonl"), "--config", str(cfg),
                   "--out", str(tmp_path / "gen")])
    assert rc == 4


def test_workers_caps_threads(tmp_path):
    before = torch.get_num_threads()
    try:
        cli.main(["--workers", "1", "make-toy", "--out", str(tmp_path), "--per-class", "1", "--size", "8"])
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)


def test_work_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(pipeline.WORK_DIR_ENV, str(tmp_path / "elsewhere"))
    cfg = pipeline.ExperimentConfig.from_dict({"real_manifest": "r", "test_manifest": "t", "negatives_dir": "n"})
    assert cfg.work_dir == str(tmp_path / "elsewhere")


def test_schema_rejects_bad_nested_config():
    with pytest.raises(ConfigError):
        pipeline.validate_config({"steps": -1}, "generator")
    with pytest.raises(ConfigError):
        pipeline.validate_config({"base_count": 10, "pairing": "yes"}, "suite")
    pipeline.validate_config({"base_count": 10, "seed": 1, "pairing": False}, "suite")


# -- whole loop ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    work = tmp_path_factory.mktemp("cli-run")
    assert cli.main(["reproduce-toy", "--work", str(work), "--seed", "3"] + FAST_TOY_ARGS) == 0
    return work


def test_pipeline_artifacts(toy_run):
    w = toy_run
    for rel in ["generator/model.pt", "generator/loss.csv", "generated/manifest.jsonl", "filters/domain.pt",
                "filters/ensemble.pt", "curation/domain/decisions.jsonl", "curation/label/decisions.jsonl",
                "curation/augment/manifest.jsonl", "curation/augment/curation_report.json",
                "scenarios/suite.json", "report/report.json", "report/report.csv", "report/report.txt"]:
        assert (w / rel).is_file(), rel
    for name in ("real-small", "real", "hybrid", "synthetic"):
        assert (w / "scenarios" / f"{name}.jsonl").is_file()
        assert (w / "ensembles" / name / "ensemble.pt").is_file()
        assert (w / "report" / "scores" / f"{name}.csv").is_file()
    # every stage directory carries its input digests and config echo
    records = sorted(w.rglob("stage.json"))
    assert len(records) == 13
    rec = json.loads((w / "scenarios" / "stage.json").read_text())
    assert set(rec) == {"stage", "digest", "inputs", "config", "outputs"} and "synthetic" in rec["inputs"]
    curated = load_manifest(w / "curation/augment/manifest.jsonl")
    assert curated.stages == ["generate", "filter-domain", "filter-label", "augment"]


def test_rerun_skips_every_stage(toy_run):
    before = _tree(toy_run)
    runner = pipeline.StageRunner()
    pipeline.reproduce_toy(toy_run, 3, runner=runner, **FAST_TOY)
    assert runner.ran == [] and len(runner.skipped) == 13
    assert _tree(toy_run) == before


def test_changed_config_reruns_downstream(toy_run, tmp_path):
    work = tmp_path / "copy"
    shutil.copytree(toy_run, work)
    runner = pipeline.StageRunner()
    pipeline.reproduce_toy(work, 3, runner=runner, **{**FAST_TOY, "base_count": 8})
    assert runner.ran == ["scenario", "train:real-small", "train:real", "train:hybrid", "train:synthetic",
                          "evaluate"]


def test_stage_subcommands_on_run_outputs(toy_run, tmp_path, capsys):
    w = toy_run
    gen = w / "generated/manifest.jsonl"
    assert cli.main(["filter-domain", "--in", str(gen), "--scorer", str(w / "filters/domain.pt"),
                     "--out", str(tmp_path / "d")]) == 0
    assert load_manifest(tmp_path / "d/manifest.jsonl").record_ids == \
        load_manifest(w / "curation/domain/manifest.jsonl").record_ids
    assert cli.main(["filter-label", "--in", str(tmp_path / "d/manifest.jsonl"),
                     "--ensemble", str(w / "filters/ensemble.pt"), "--out", str(tmp_path / "l")]) == 0
    assert cli.main(["augment", "--generated", str(gen), "--domain", str(tmp_path / "d/manifest.jsonl"),
                     "--label", str(tmp_path / "l/manifest.jsonl"), "--out", str(tmp_path / "a")]) == 0
    ours = json.loads((tmp_path / "a/curation_report.json").read_text())
    theirs = json.loads((w / "curation/augment/curation_report.json").read_text())
    assert ours == theirs
    # augment only accepts label-filter output
    assert cli.main(["augment", "--generated", str(gen), "--domain", str(gen), "--label", str(gen),
                     "--out", str(tmp_path / "x")]) == 3

    suite_cfg = _write(tmp_path / "suite.json", {"base_count": 4, "seed": 1, "pairing": True})
    assert cli.main(["scenario", "--real", str(w / "data/real/manifest.jsonl"),
                     "--synthetic", str(tmp_path / "a/manifest.jsonl"), "--config", str(suite_cfg),
                     "--out", str(tmp_path / "s")]) == 0
    hyb = load_manifest(tmp_path / "s/hybrid.jsonl")
    assert class_counts(hyb, "synthetic") == {c: 2 for c in CLASS_IDS}

    tcfg = _write(tmp_path / "train.json", {"epochs": 2, "image_size": 16, "batch_size": 16})
    assert cli.main(["train", "--scenario", str(tmp_path / "s/hybrid.jsonl"), "--config", str(tcfg),
                     "--out", str(tmp_path / "e/hybrid")]) == 0
    assert (tmp_path / "e/hybrid/history.csv").read_text().startswith("arch_id,epoch,train_loss")
    capsys.readouterr()
    assert cli.main(["evaluate", "--ensembles", str(tmp_path / "e"), "--test", str(w / "data/test/manifest.jsonl"),
                     "--out", str(tmp_path / "r"), "--ks", "1,3,6"]) == 0
    assert "Top-6" in capsys.readouterr().out
    assert cli.main(["report", "--in", str(tmp_path / "r/report.json"), "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("dataset,real,synthetic,top1,top3,top6\nhybrid,2,2,")
    assert out.rstrip().endswith(",100.00")
    # evaluating on the training data is refused
    assert cli.main(["evaluate", "--ensembles", str(tmp_path / "e"), "--test", str(tmp_path / "s/hybrid.jsonl"),
                     "--out", str(tmp_path / "r2")]) == 3


def test_generator_subcommands(toy_run, tmp_path):
    w = toy_run
    gcfg = _write(tmp_path / "g.json", {"steps": 3, "image_size": 16, "base_channels": 16, "timesteps": 100})
    assert cli.main(["train-embeddings", "--checkpoint", str(w / "generator/model.pt"),
                     "--real", str(w / "data/real/manifest.jsonl"), "--config", str(gcfg),
                     "--classes", "melanoma", "--out", str(tmp_path / "ti")]) == 0
    run = _write(tmp_path / "run.json", {"run_id": "extra", "seed": 5, "per_class_counts": {"melanoma": 3},
                                         "out_dir": str(tmp_path / "gen")})
    assert cli.main(["generate", "--checkpoint", str(tmp_path / "ti/model.pt"), "--config", str(run)]) == 0
    m = load_manifest(tmp_path / "gen/manifest.jsonl")
    assert len(m) == 3 and all(r.provenance["generator_run_id"] == "extra" for r in m.records)
    assert cli.main(["train", "--scenario", str(w / "data/real/manifest.jsonl"), "--negatives",
                     str(w / "data/negatives"), "--config", str(_write(tmp_path / "t.json", {"epochs": 1,
                     "image_size": 16})), "--out", str(tmp_path / "dom")]) == 0
    assert (tmp_path / "dom/domain.pt").is_file()
