"""Command-line front end: generate, run, evaluate, report, selfcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data, report
from .config import ConfigError, ExperimentConfig, load_config
from .evaluate import MetricsReport, evaluate_method, export_embeddings
from .model import EncoderSpec, load_checkpoint, save_checkpoint
from .train import TrainingDiverged, kfold_plan, train_method

log = logging.getLogger("shortcutbench")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class RunFailure(RuntimeError):
    pass


# -- run directory layout -------------------------------------------------------


def data_dir(cfg: ExperimentConfig) -> Path:
    return cfg.output / "data"


def fold_dir(cfg: ExperimentConfig, method: str, fold: int) -> Path:
    return cfg.output / "runs" / method / f"fold{fold}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_resolved(cfg: ExperimentConfig) -> None:
    cfg.output.mkdir(parents=True, exist_ok=True)
    (cfg.output / "config.json").write_text(cfg.resolved_json())


def load_bundle(cfg: ExperimentConfig) -> data.SplitBundle:
    d = data_dir(cfg)
    parts, start = {}, 0
    for name in data.SplitBundle.NAMES:
        path = d / f"{name}.cbd"
        if not path.exists():
            raise RunFailure(f"missing dataset {path}; run 'generate' first")
        parts[name] = data.load_dataset(path, first_id=start, name=name)
        start += len(parts[name])
    return data.SplitBundle(**parts)


# -- commands -------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig) -> int:
    bundle = data.make_split_bundle(cfg.cooccurrence, cfg.val_fraction,
                                    (cfg.inverted_size, cfg.balanced_size), cfg.seed, cfg.glyph)
    d = data_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg)
    sums = {}
    for name, ds in bundle.items():
        path = d / f"{name}.cbd"
        data.save_dataset(ds, path)
        sums[f"{name}.cbd"] = _sha256(path)
        counts = ds.cell_counts()
        print(f"{name:<10} n={len(ds):<5} y2\\y1  0     1")
        for y2 in (0, 1):
            print(f"{'':<18}{y2}  {counts[y2][0]:<5} {counts[y2][1]:<5}")
    (d / "checksums.json").write_text(json.dumps(sums, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _train_job(cfg_raw: dict, output: str, method: str, fold: int) -> tuple[str, int, str | None]:
    """One (method, fold) job; runs in a worker process when --jobs > 1."""
    cfg = load_config(None, {**cfg_raw, "output": output})
    try:
        bundle = load_bundle(cfg)
        plan = kfold_plan(bundle.train, cfg.train.k_folds, cfg.seed)
        tr, va = plan.split(bundle.train, fold)
        mcfg = cfg.method(method)
        result = train_method(mcfg, tr, va, cfg.train, seed=[cfg.seed, fold], spec=cfg.encoder)
    except (TrainingDiverged, RunFailure) as exc:
        return method, fold, str(exc)
    out = fold_dir(cfg, method, fold)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "model.cbm")
    result.history.to_csv(out / "history.csv")
    meta = {
        "method": method,
        "fold": fold,
        "best_epoch": result.best_epoch,
        "encoder_steps": result.history.encoder_steps,
        "estimator_steps": result.history.estimator_steps,
        "encoder": result.model.spec.to_dict(),
        "fold_train_ids": [int(i) for i in tr.ids],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return method, fold, None


def cmd_run(cfg: ExperimentConfig, methods: list[str], folds: list[int], jobs: int = 1) -> int:
    load_bundle(cfg)  # fail fast when data is missing
    _write_resolved(cfg)
    tasks = [(m, f) for m in methods for f in folds]
    raw, out = cfg.raw, str(cfg.output)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_job, *zip(*[(raw, out, m, f) for m, f in tasks])))
    else:
        results = [_train_job(raw, out, m, f) for m, f in tasks]
    failed = [(m, f, err) for m, f, err in results if err]
    for m, f, err in results:
        print(f"{m} fold {f}: {'FAILED ' + err if err else 'ok'}")
    if failed:
        names = ", ".join(f"{m}/fold{f}" for m, f, _ in failed)
        print(f"error: training failed for {names}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def evaluate_all(cfg: ExperimentConfig) -> MetricsReport:
    bundle = load_bundle(cfg)
    plan = kfold_plan(bundle.train, cfg.train.k_folds, cfg.seed)
    rep = MetricsReport()
    emb_dir = cfg.output / "embeddings"
    for mcfg in cfg.methods:
        for fold in range(cfg.train.k_folds):
            ckpt = fold_dir(cfg, mcfg.name, fold) / "model.cbm"
            if not ckpt.exists():
                continue
            meta = json.loads((ckpt.parent / "meta.json").read_text())
            model = load_checkpoint(ckpt, EncoderSpec.from_dict(meta["encoder"]))
            reference, _ = plan.split(bundle.train, fold)
            ev = evaluate_method(model, bundle, reference, mcfg.name, fold, cfg.knn_k, cfg.auroc)
            rep.add(ev, mcfg.name, fold)
            if cfg.embeddings:
                emb_dir.mkdir(parents=True, exist_ok=True)
                export_embeddings(model, bundle.balanced, emb_dir / f"{mcfg.name}_fold{fold}.csv",
                                  "balanced")
    return rep


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    rep = evaluate_all(cfg)
    if not rep.rows:
        print("error: no trained checkpoints found; run 'run' first", file=sys.stderr)
        return EXIT_FAIL
    mdir = cfg.output / "metrics"
    mdir.mkdir(parents=True, exist_ok=True)
    (mdir / "metrics.csv").write_text(rep.to_csv())
    (mdir / "summary.json").write_text(json.dumps(rep.summary(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {mdir / 'metrics.csv'}")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig) -> int:
    path = cfg.output / "metrics" / "metrics.csv"
    if not path.exists():
        print(f"error: {path} not found; run 'evaluate' first", file=sys.stderr)
        return EXIT_FAIL
    rep = MetricsReport.from_csv(path.read_text())
    gaps = [f"{m.name}/fold{f}" for m in cfg.methods for f in range(cfg.train.k_folds)
            if (m.name, f) not in rep.knn]
    if gaps:
        print("error: missing fold results: " + ", ".join(gaps), file=sys.stderr)
        return EXIT_FAIL
    kinds = {m.name: m.method for m in cfg.methods}
    rdir = cfg.output / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    for stem, table in report.build_tables(rep, kinds, with_auroc=cfg.auroc).items():
        (rdir / f"{stem}.csv").write_text(table.to_csv())
        text = table.to_text()
        (rdir / f"{stem}.txt").write_text(text)
        print(text)
    return EXIT_OK


def cmd_selfcheck() -> int:
    from . import selfcheck
    return EXIT_OK if selfcheck.run() else EXIT_FAIL


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shortcutbench",
                                description="Dependence-measure benchmark against shortcut learning.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the split datasets")
    run = sub.add_parser("run", parents=[common], help="train methods on folds")
    run.add_argument("--method", action="append",
                     help="method name from the config (repeatable; default: all)")
    which = run.add_mutually_exclusive_group()
    which.add_argument("--fold", type=int, action="append", help="fold index (repeatable)")
    which.add_argument("--all", action="store_true", help="all folds (default)")
    run.add_argument("--jobs", type=int, default=1, help="parallel (method, fold) jobs")
    sub.add_parser("evaluate", parents=[common], help="compute metrics and embeddings")
    sub.add_parser("report", parents=[common], help="render result tables")
    sub.add_parser("selfcheck", help="run the oracle suite")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "selfcheck":
        return cmd_selfcheck()

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output"] = args.out
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "run":
            names = [m.name for m in cfg.methods]
            methods = args.method or names
            unknown = [m for m in methods if m not in names]
            if unknown:
                parser.error(f"unknown method {unknown[0]!r}; configured: {', '.join(names)}")
            folds = args.fold if args.fold else list(range(cfg.train.k_folds))
            bad = [f for f in folds if not 0 <= f < cfg.train.k_folds]
            if bad:
                parser.error(f"fold {bad[0]} out of range 0..{cfg.train.k_folds - 1}")
            if args.jobs < 1:
                parser.error("--jobs must be >= 1")
            return cmd_run(cfg, methods, folds, args.jobs)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "report":
            return cmd_report(cfg)
    except (RunFailure, data.FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
