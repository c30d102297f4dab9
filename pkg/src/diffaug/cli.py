"""Command-line entry point: ``diffaug <subcommand> ...``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import evaluation, generator, pipeline, toy, training
from .dataset import load_manifest
from .errors import ConfigError, DiffaugError

log = logging.getLogger("diffaug")


def _gen_config(args) -> generator.GeneratorConfig:
    d = pipeline.read_config(args.config, "generator") if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    return generator.GeneratorConfig.from_dict(d)


def _train_config(args) -> training.TrainConfig:
    d = pipeline.read_config(args.config, "train") if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    return training.TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_make_toy(args):
    m = toy.make_toy_dataset(args.out, args.per_class, args.seed, args.size, args.prefix)
    if args.negatives:
        toy.make_negatives(Path(args.out) / "negatives", args.negatives, args.seed, args.size)
    print(f"wrote {len(m)} images to {args.out}")


def cmd_train_generator(args):
    cfg = _gen_config(args)
    curve = pipeline.do_train_generator(args.real, cfg, args.out)
    if curve:
        print(f"smoothed loss {curve[0]:.4f} -> {curve[-1]:.4f} over {cfg.steps} steps")


def cmd_train_embeddings(args):
    cfg = _gen_config(args)
    classes = args.classes.split(",") if args.classes else None
    pipeline.do_train_embeddings(args.checkpoint, args.real, cfg, args.out, classes)
    print(f"wrote {Path(args.out) / 'model.pt'}")


def cmd_generate(args):
    d = pipeline.read_config(args.config, "generation")
    if args.seed is not None:
        d["seed"] = args.seed
    run = generator.GeneratorRun.from_dict(d)
    m = pipeline.do_generate(args.checkpoint, run)
    print(f"generated {len(m)} images under {run.out_dir}")


def cmd_filter_domain(args):
    m = pipeline.do_filter_domain(args.input, args.scorer, args.threshold, args.out)
    print(f"domain filter kept {len(m)} records")


def cmd_filter_label(args):
    m = pipeline.do_filter_label(args.input, args.ensemble, args.out)
    print(f"label filter kept {len(m)} records")


def cmd_augment(args):
    _, report = pipeline.do_augment(args.generated, args.domain, args.label, args.threshold, args.out)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))


def cmd_scenario(args):
    cfg = pipeline.read_config(args.config, "suite")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    summary = pipeline.do_scenarios(args.real, args.synthetic, cfg["base_count"], seed,
                                    cfg.get("pairing", True), args.out)
    for name, s in summary["scenarios"].items():
        print(f"{name}: {s['records']} records")


def cmd_train(args):
    cfg = _train_config(args)
    if args.negatives:
        scorer = training.train_domain_scorer(load_manifest(args.scenario), pipeline.list_pngs(args.negatives), cfg)
        training.save_domain_scorer(scorer, Path(args.out) / "domain.pt")
        print(f"wrote {Path(args.out) / 'domain.pt'}")
        return
    ens = pipeline.do_train(args.scenario, cfg, args.out)
    for m, h in zip(ens.members, ens.histories):
        print(f"{m.arch_id}: best epoch {h.best_epoch}, stopped at {h.stopped_epoch}")


def _find_ensembles(root) -> dict:
    root = Path(root)
    found = {p.parent.name: p for p in sorted(root.glob("*/ensemble.pt"))}
    found.update({p.stem: p for p in sorted(root.glob("*.pt"))})
    if not found:
        raise ConfigError(f"no ensemble checkpoints under {root}")
    return found


def cmd_evaluate(args):
    ks = tuple(int(k) for k in args.ks.split(","))
    report = pipeline.do_evaluate(_find_ensembles(args.ensembles), args.test, args.out, ks)
    print(evaluation.render_report(report, "table"), end="")


def cmd_report(args):
    report = evaluation.EvalReport.from_json(json.loads(Path(args.input).read_text(encoding="utf-8")))
    sys.stdout.write(evaluation.render_report(report, args.format))


def cmd_run(args):
    cfg = pipeline.ExperimentConfig.load(args.config)
    cfg.workers = args.workers
    arts = pipeline.run_pipeline(cfg)
    print(Path(arts["report"].parent / "report.txt").read_text(encoding="utf-8"), end="")


def cmd_reproduce_toy(args):
    overrides = {}
    for key in ("per_class", "test_per_class", "negatives", "generate_per_class", "base_count", "image_size"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    if args.generator_steps is not None:
        overrides["generator"] = {"steps": args.generator_steps}
    arts = pipeline.reproduce_toy(args.work, args.seed, args.workers, **overrides)
    print(Path(arts["report"].parent / "report.txt").read_text(encoding="utf-8"), end="")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffaug", description="Diffusion-based augmentation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    p.add_argument("--workers", type=int, default=1, help="cap on worker threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("make-toy", cmd_make_toy, "Render the procedural six-class toy dataset.")
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-class", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--prefix", default="toy")
    sp.add_argument("--negatives", type=int, default=0, help="also render N out-of-domain images")

    for name, fn, help_ in (("train-generator", cmd_train_generator, "Train denoiser and class embeddings."),
                            ("train-embeddings", cmd_train_embeddings, "Train class embeddings only.")):
        sp = add(name, fn, help_)
        if name == "train-embeddings":
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--classes", help="comma-separated class ids to update (default: all present)")
        sp.add_argument("--real", required=True, help="training manifest")
        sp.add_argument("--config", help="generator config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)

    sp = add("generate", cmd_generate, "Sample images from a generator checkpoint into a manifest.")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config", required=True, help="generation config JSON")
    sp.add_argument("--seed", type=int)

    sp = add("filter-domain", cmd_filter_domain, "Keep images the domain scorer accepts.")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--scorer", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("filter-label", cmd_filter_label, "Keep images whose top-1 ensemble label matches.")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--ensemble", required=True)
    sp.add_argument("--out", required=True)

    sp = add("augment", cmd_augment, "Assemble the curated pool and its acceptance report.")
    sp.add_argument("--generated", required=True)
    sp.add_argument("--domain", required=True)
    sp.add_argument("--label", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("scenario", cmd_scenario, "Build the real-small/real/hybrid/synthetic suite.")
    sp.add_argument("--real", required=True)
    sp.add_argument("--synthetic", required=True)
    sp.add_argument("--config", required=True, help="suite config JSON {base_count, seed, pairing}")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "Train a classifier ensemble (or, with --negatives, a domain scorer).")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--config", help="train config JSON")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--negatives", help="directory of out-of-domain PNGs; trains a domain scorer")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "Top-k evaluation of every ensemble on a test manifest.")
    sp.add_argument("--ensembles", required=True, help="directory of <scenario>/ensemble.pt")
    sp.add_argument("--test", required=True)
    sp.add_argument("--ks", default="1,2,3,4,5")
    sp.add_argument("--out", required=True)

    sp = add("report", cmd_report, "Render a saved report.json.")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--format", choices=("table", "csv", "json"), default="table")

    sp = add("run", cmd_run, "Run the whole pipeline from an experiment config.")
    sp.add_argument("--config", required=True)

    sp = add("reproduce-toy", cmd_reproduce_toy, "Whole loop at desk scale on procedural data.")
    sp.add_argument("--work", default=os.environ.get(pipeline.WORK_DIR_ENV, "work"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--test-per-class", type=int)
    sp.add_argument("--negatives", type=int, help="number of out-of-domain images")
    sp.add_argument("--generate-per-class", type=int)
    sp.add_argument("--base-count", type=int)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--generator-steps", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.workers)
    try:
        args.fn(args)
    except DiffaugError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
