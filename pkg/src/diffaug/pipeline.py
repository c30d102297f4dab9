"""Stage-cached experiment pipeline: generator -> generation -> curation -> scenarios
-> ensembles -> evaluation.

Each stage writes into its own directory together with ``stage.json`` (config echo
plus input digests). A stage is skipped when that record's digest matches the
current inputs and every declared output exists.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import jsonschema
import torch

from . import curation, evaluation, generator, scenarios, toy, training
from .dataset import load_manifest, save_manifest
from .errors import ConfigError, DataError, StageError
from .images import list_pngs
from .rng import derive_seed

log = logging.getLogger("diffaug")

WORK_DIR_ENV = "DIFFAUG_WORK_DIR"
STAGE_RECORD = "stage.json"


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def load_schema() -> dict:
    text = resources.files("diffaug").joinpath("schemas/config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_config(obj: dict, kind: str) -> None:
    schema = load_schema()
    sub = {"$defs": schema["$defs"], **schema["$defs"][kind]}
    try:
        jsonschema.validate(obj, sub)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{kind} config invalid at {where}: {e.message}") from None


def read_config(path, kind: str) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    validate_config(obj, kind)
    return obj


@dataclass
class ExperimentConfig:
    real_manifest: str
    test_manifest: str
    negatives_dir: str
    work_dir: str = "work"
    seed: int = 0
    generator: dict = field(default_factory=dict)
    generate_per_class: int = 300
    threshold: float = curation.DEFAULT_THRESHOLD
    suite: dict = field(default_factory=lambda: {"base_count": 100, "pairing": True})
    train: dict = field(default_factory=dict)
    filters: dict = field(default_factory=dict)
    ks: list = field(default_factory=lambda: list(evaluation.REPORT_KS))
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        validate_config(d, "experiment")
        cfg = cls(**d)
        if base_dir is not None:
            for key in ("real_manifest", "test_manifest", "negatives_dir", "work_dir"):
                p = Path(getattr(cfg, key))
                if not p.is_absolute():
                    setattr(cfg, key, str(Path(base_dir) / p))
        if os.environ.get(WORK_DIR_ENV):
            cfg.work_dir = os.environ[WORK_DIR_ENV]
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        obj = json.loads(Path(path).read_text(encoding="utf-8")) if Path(path).exists() else None
        if obj is None:
            raise ConfigError(f"config file not found: {path}")
        return cls.from_dict(obj, Path(path).parent)

    # all seeds come from the root seed through named substreams
    def generator_config(self) -> generator.GeneratorConfig:
        return generator.GeneratorConfig.from_dict({**self.generator, "seed": derive_seed(self.seed, "train-generator")})

    def train_config(self, stage: str, base: Optional[dict] = None) -> training.TrainConfig:
        d = dict(self.train if base is None else base)
        d["seed"] = derive_seed(self.seed, stage)
        return training.TrainConfig.from_dict(d)

    def echo(self) -> dict:
        """Config without filesystem paths, safe to embed in reports."""
        d = asdict(self)
        for key in ("real_manifest", "test_manifest", "negatives_dir", "work_dir", "workers"):
            d.pop(key)
        return d


# ---------------------------------------------------------------------------
# Digests and stage records
# ---------------------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dir_digest(path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(path).rglob("*")):
        if p.is_file():
            h.update(p.relative_to(path).as_posix().encode())
            h.update(file_digest(p).encode())
    return h.hexdigest()


def manifest_digest(path) -> str:
    """Digest of the manifest text and every image it references."""
    m = load_manifest(path)
    h = hashlib.sha256(file_digest(path).encode())
    for r in m.records:
        h.update(file_digest(m.resolve(r)).encode())
    return h.hexdigest()


def _json_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


class StageRunner:
    def __init__(self, log_fn: Callable[[str], None] = log.info):
        self.log = log_fn
        self.ran: list[str] = []
        self.skipped: list[str] = []

    def run(self, name: str, out_dir, inputs: dict, config: dict, outputs: list, fn: Callable[[], None]) -> bool:
        """Run ``fn`` unless ``out_dir/stage.json`` already records this exact digest."""
        out_dir = Path(out_dir)
        try:
            input_digests = {k: v() if callable(v) else v for k, v in sorted(inputs.items())}
            digest = _json_digest({"stage": name, "inputs": input_digests, "config": config})
            rec_path = out_dir / STAGE_RECORD
            if rec_path.exists() and all(Path(o).exists() for o in outputs):
                rec = json.loads(rec_path.read_text(encoding="utf-8"))
                if rec.get("digest") == digest:
                    self.log(f"[{name}] up to date, skipped")
                    self.skipped.append(name)
                    return False
            self.log(f"[{name}] running")
            out_dir.mkdir(parents=True, exist_ok=True)
            fn()
            record = {"stage": name, "digest": digest, "inputs": input_digests, "config": config,
                      "outputs": [Path(o).relative_to(out_dir).as_posix() for o in outputs]}
            rec_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            self.ran.append(name)
            return True
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, e) from e


# ---------------------------------------------------------------------------
# Stage bodies (shared with the CLI subcommands)
# ---------------------------------------------------------------------------


def do_train_generator(real_path, cfg: generator.GeneratorConfig, out_dir) -> list[float]:
    real = load_manifest(real_path)
    schedule = cfg.schedule()
    model, table, curve = generator.train_denoiser(real, schedule, cfg)
    generator.save_generator(Path(out_dir) / "model.pt", model, table, schedule, cfg)
    _write_curve(Path(out_dir) / "loss.csv", curve)
    return curve


def do_train_embeddings(ckpt, real_path, cfg: generator.GeneratorConfig, out_dir, classes=None):
    model, table, schedule, _ = generator.load_generator(ckpt)
    real = load_manifest(real_path)
    new_table = generator.train_embeddings(model, real, cfg, schedule, table, classes)
    generator.save_generator(Path(out_dir) / "model.pt", model, new_table, schedule, cfg)
    return new_table


def _write_curve(path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "smoothed_loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(curve))


def do_generate(ckpt, run: generator.GeneratorRun, taxonomy=None):
    model, table, schedule, _ = generator.load_generator(ckpt)
    from .dataset import DEFAULT_TAXONOMY
    m = generator.generate_to_manifest(run, model, table, schedule, taxonomy or DEFAULT_TAXONOMY)
    return save_manifest(m, Path(run.out_dir) / "manifest.jsonl")


def do_train_filters(real_path, negatives_dir, cfg: training.TrainConfig, out_dir) -> None:
    real = load_manifest(real_path)
    negs = list_pngs(negatives_dir)
    scorer = training.train_domain_scorer(real, negs, cfg)
    training.save_domain_scorer(scorer, Path(out_dir) / "domain.pt")
    ens = training.train_ensemble(real, cfg)
    training.save_ensemble(ens, Path(out_dir) / "ensemble.pt")


def do_filter_domain(in_path, scorer_path, threshold, out_dir):
    m = load_manifest(in_path)
    kept, decisions = curation.domain_filter(m, training.load_domain_scorer(scorer_path), threshold)
    curation.write_decisions(decisions, Path(out_dir) / "decisions.jsonl")
    return save_manifest(kept, Path(out_dir) / "manifest.jsonl")


def do_filter_label(in_path, ensemble_path, out_dir):
    m = load_manifest(in_path)
    kept, decisions = curation.label_filter(m, training.load_ensemble(ensemble_path))
    curation.write_decisions(decisions, Path(out_dir) / "decisions.jsonl")
    return save_manifest(kept, Path(out_dir) / "manifest.jsonl")


def do_augment(generated_path, domain_path, label_path, threshold, out_dir):
    """Final curated augmentation pool plus the acceptance accounting."""
    gen, dom, lab = (load_manifest(p) for p in (generated_path, domain_path, label_path))
    if "filter-label" not in lab.stages:
        raise DataError(f"{label_path} is not label-filter output (created_by={lab.created_by!r})")
    report = curation.report_from_manifests(gen, dom, lab, threshold)
    curation.write_report(report, Path(out_dir) / "curation_report.json")
    return save_manifest(lab.derive("augment", lab.records), Path(out_dir) / "manifest.jsonl"), report


def do_scenarios(real_path, synthetic_path, base_count, seed, pairing, out_dir) -> dict:
    real = load_manifest(real_path)
    syn = load_manifest(synthetic_path)
    suite = scenarios.standard_suite(base_count, real, syn, seed, pairing)
    return scenarios.write_suite(suite, out_dir, base_count, seed, pairing)


def do_train(scenario_path, cfg: training.TrainConfig, out_dir) -> training.EnsembleModel:
    m = load_manifest(scenario_path)
    ens = training.train_ensemble(m, cfg)
    name = m.created_by.split(":", 1)[1] if m.created_by.startswith("scenario:") else Path(scenario_path).stem
    ens.trained_on["scenario"] = name
    training.save_ensemble(ens, Path(out_dir) / "ensemble.pt")
    with open(Path(out_dir) / "history.csv", "w", newline="", encoding="utf-8") as f:
        rows = training.history_table(ens)
        w = csv.DictWriter(f, ["arch_id", "epoch", "train_loss", "val_accuracy", "val_loss"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return ens


def do_evaluate(ensembles: dict, test_path, out_dir, ks=evaluation.REPORT_KS, config_echo=None):
    test = load_manifest(test_path)
    loaded = {name: training.load_ensemble(p) for name, p in ensembles.items()}
    report, dumps = evaluation.evaluate_scenarios(loaded, test, ks, config_echo)
    evaluation.write_report_files(out_dir, report, dumps, test)
    return report


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def run_pipeline(cfg: ExperimentConfig, runner: Optional[StageRunner] = None) -> dict:
    """Run (or resume) every stage under ``cfg.work_dir``; returns the artifact paths."""
    runner = runner or StageRunner()
    torch.set_num_threads(cfg.workers)
    work = Path(cfg.work_dir)
    real_path, test_path = Path(cfg.real_manifest), Path(cfg.test_manifest)
    for p in (real_path, test_path):
        if not p.exists():
            raise StageError("inputs", DataError(f"manifest not found: {p}"))
    if not Path(cfg.negatives_dir).is_dir():
        raise StageError("inputs", DataError(f"negatives directory not found: {cfg.negatives_dir}"))

    real_d = lambda: manifest_digest(real_path)
    gcfg = cfg.generator_config()
    gen_dir = work / "generator"
    runner.run("train-generator", gen_dir, {"real": real_d}, asdict(gcfg),
               [gen_dir / "model.pt"], lambda: do_train_generator(real_path, gcfg, gen_dir))

    from .dataset import DEFAULT_TAXONOMY
    real_tax = load_manifest(real_path).taxonomy
    gdir = work / "generated"
    run = generator.GeneratorRun("gen", derive_seed(cfg.seed, "generate"),
                                 {c: cfg.generate_per_class for c in real_tax.class_ids}, str(gdir))
    run_cfg = {k: v for k, v in asdict(run).items() if k != "out_dir"}
    runner.run("generate", gdir, {"generator": lambda: file_digest(gen_dir / "model.pt")}, run_cfg,
               [gdir / "manifest.jsonl"], lambda: do_generate(gen_dir / "model.pt", run, real_tax))

    fcfg = cfg.train_config("train-filters", {**cfg.train, **cfg.filters})
    fdir = work / "filters"
    runner.run("train-filters", fdir, {"real": real_d, "negatives": lambda: dir_digest(cfg.negatives_dir)},
               fcfg.to_json(), [fdir / "domain.pt", fdir / "ensemble.pt"],
               lambda: do_train_filters(real_path, cfg.negatives_dir, fcfg, fdir))

    ddir, ldir, adir = work / "curation" / "domain", work / "curation" / "label", work / "curation" / "augment"
    runner.run("filter-domain", ddir, {"generated": lambda: manifest_digest(gdir / "manifest.jsonl"),
                                       "scorer": lambda: file_digest(fdir / "domain.pt")},
               {"threshold": cfg.threshold}, [ddir / "manifest.jsonl", ddir / "decisions.jsonl"],
               lambda: do_filter_domain(gdir / "manifest.jsonl", fdir / "domain.pt", cfg.threshold, ddir))
    runner.run("filter-label", ldir, {"domain": lambda: manifest_digest(ddir / "manifest.jsonl"),
                                      "ensemble": lambda: file_digest(fdir / "ensemble.pt")},
               {}, [ldir / "manifest.jsonl", ldir / "decisions.jsonl"],
               lambda: do_filter_label(ddir / "manifest.jsonl", fdir / "ensemble.pt", ldir))
    runner.run("augment", adir, {"generated": lambda: file_digest(gdir / "manifest.jsonl"),
                                 "domain": lambda: file_digest(ddir / "manifest.jsonl"),
                                 "label": lambda: file_digest(ldir / "manifest.jsonl")},
               {"threshold": cfg.threshold}, [adir / "manifest.jsonl", adir / "curation_report.json"],
               lambda: do_augment(gdir / "manifest.jsonl", ddir / "manifest.jsonl", ldir / "manifest.jsonl",
                                  cfg.threshold, adir))

    sdir = work / "scenarios"
    base = int(cfg.suite.get("base_count", 100))
    pairing = bool(cfg.suite.get("pairing", True))
    s_seed = derive_seed(cfg.seed, "scenario")
    names = list(scenarios.STANDARD_NAMES)
    runner.run("scenario", sdir, {"real": real_d, "synthetic": lambda: manifest_digest(adir / "manifest.jsonl")},
               {"base_count": base, "pairing": pairing, "seed": s_seed},
               [sdir / f"{n}.jsonl" for n in names] + [sdir / "suite.json"],
               lambda: do_scenarios(real_path, adir / "manifest.jsonl", base, s_seed, pairing, sdir))

    ens_paths = {}
    for name in names:
        edir = work / "ensembles" / name
        tcfg = cfg.train_config(f"train:{name}")
        spath = sdir / f"{name}.jsonl"
        runner.run(f"train:{name}", edir, {"scenario": lambda p=spath: manifest_digest(p)}, tcfg.to_json(),
                   [edir / "ensemble.pt", edir / "history.csv"],
                   lambda p=spath, c=tcfg, d=edir: do_train(p, c, d))
        ens_paths[name] = edir / "ensemble.pt"

    rdir = work / "report"
    echo = cfg.echo()
    runner.run("evaluate", rdir, {"test": lambda: manifest_digest(test_path),
                                  **{f"ensemble:{n}": (lambda p=p: file_digest(p)) for n, p in ens_paths.items()}},
               {"ks": list(cfg.ks), "echo": echo},
               [rdir / "report.json", rdir / "report.csv"] + [rdir / "scores" / f"{n}.csv" for n in names],
               lambda: do_evaluate(ens_paths, test_path, rdir, tuple(cfg.ks), echo))

    return {
        "generator": gen_dir / "model.pt",
        "generated": gdir / "manifest.jsonl",
        "curated": adir / "manifest.jsonl",
        "curation_report": adir / "curation_report.json",
        "scenarios": {n: sdir / f"{n}.jsonl" for n in names},
        "ensembles": ens_paths,
        "report": rdir / "report.json",
        "report_csv": rdir / "report.csv",
        "scores": {n: rdir / "scores" / f"{n}.csv" for n in names},
    }


# ---------------------------------------------------------------------------
# Desk-scale reproduction on procedural data
# ---------------------------------------------------------------------------

TOY_DEFAULTS = {
    "per_class": 200,
    "test_per_class": 60,
    "negatives": 300,
    "image_size": 16,
    "generator": {"steps": 1500, "timesteps": 100, "base_channels": 16, "batch_size": 64, "lr": 2e-3},
    "generate_per_class": 300,
    "base_count": 100,
}


def toy_experiment(work_dir, seed: int = 0, **overrides) -> tuple[ExperimentConfig, dict]:
    """Settings for ``reproduce-toy``; ``overrides`` replace keys of ``TOY_DEFAULTS``."""
    opts = {**TOY_DEFAULTS, **overrides}
    opts["generator"] = {**TOY_DEFAULTS["generator"], **overrides.get("generator", {}),
                         "image_size": opts["image_size"]}
    work = Path(work_dir)
    data = work / "data"
    cfg = ExperimentConfig(
        real_manifest=str(data / "real" / toy.MANIFEST_NAME),
        test_manifest=str(data / "test" / toy.MANIFEST_NAME),
        negatives_dir=str(data / "negatives"),
        work_dir=str(work),
        seed=seed,
        generator=opts["generator"],
        generate_per_class=opts["generate_per_class"],
        suite={"base_count": opts["base_count"], "pairing": True},
        train={"image_size": opts["image_size"], **opts.get("train", {})},
    )
    return cfg, opts


def make_toy_data(cfg: ExperimentConfig, opts: dict, runner: StageRunner) -> None:
    data = Path(cfg.real_manifest).parent.parent
    size = opts["image_size"]
    spec = {k: opts[k] for k in ("per_class", "test_per_class", "negatives", "image_size")}
    spec["seed"] = cfg.seed

    def build():
        toy.make_toy_dataset(data / "real", opts["per_class"], derive_seed(cfg.seed, "make-toy", "real"), size, "toy")
        toy.make_toy_dataset(data / "test", opts["test_per_class"], derive_seed(cfg.seed, "make-toy", "test"),
                             size, "test")
        toy.make_negatives(data / "negatives", opts["negatives"], derive_seed(cfg.seed, "make-toy", "neg"), size)

    runner.run("make-toy", data, {}, spec,
               [Path(cfg.real_manifest), Path(cfg.test_manifest), Path(cfg.negatives_dir)], build)


def reproduce_toy(work_dir, seed: int = 0, workers: int = 1, runner: Optional[StageRunner] = None,
                  **overrides) -> dict:
    cfg, opts = toy_experiment(work_dir, seed, **overrides)
    cfg.workers = workers
    runner = runner or StageRunner()
    make_toy_data(cfg, opts, runner)
    return run_pipeline(cfg, runner)
