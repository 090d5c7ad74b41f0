"""Command-line entry point: ``dlab <subcommand> [options]``.

Exit codes: 0 on success, 2 on validation errors, 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import datagen, harness, manipulate, metrics, vae
from .harness import ConfigError, ReportError

log = logging.getLogger("dlab")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _experiment(args) -> harness.ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = harness.ExperimentConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    return cfg


def _dataset(args, cfg: harness.ExperimentConfig | None = None) -> datagen.LabeledDataset:
    if getattr(args, "data", None):
        return datagen.load_dataset(args.data)
    if cfg is None:
        raise ConfigError("either --data or --config is required")
    return cfg.dataset.build()


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    if args.config:
        data = _read_json(args.config)
        spec = data.get("dataset", data) if isinstance(data, dict) else data
        ds_spec = harness._strict(harness.DatasetSpec, spec, "dataset")
    else:
        ds_spec = harness._strict(harness.DatasetSpec, {"kind": args.kind, "params": json.loads(args.params)},
                                  "dataset")
    if args.seed is not None:
        ds_spec = replace(ds_spec, seed=args.seed)
    ds = ds_spec.build()
    out = datagen.save_dataset(ds, args.out)
    _emit({"path": str(out), "kind": ds.kind, "n": ds.n, "d": ds.d})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    ds = _dataset(args, cfg)
    specs = {m.name: m for m in cfg.models}
    name = args.model or cfg.models[0].name
    if name not in specs:
        raise ConfigError(f"unknown model {name!r}; configured: {sorted(specs)}")
    spec = specs[name]
    beta = spec.betas[0] if args.beta is None else args.beta
    seed = cfg.seeds[0]
    run = harness._train_cell(spec, beta, seed, ds, cfg.train)
    out = Path(args.out)
    if run.failed:
        _emit({"failed": True, "failed_step": run.failed_step})
        return EXIT_RUNTIME
    vae.save_checkpoint(run.model, out / "model.dlck", step=cfg.train.steps, seed=seed)
    record = harness._cell_record(harness.CellKey("original", name, beta, seed), spec, run, ds, cfg)
    harness._write_json(out / "run.json", record)
    _emit({"checkpoint": str(out / "model.dlck"), "metrics": record["metrics"],
           "active_units": record["active_units"], "overpruned": record["overpruned"]})
    return EXIT_OK


def cmd_eval(args) -> int:
    model, manifest = vae.load_checkpoint(args.checkpoint)
    ds = datagen.load_dataset(args.data)
    if ds.d != model.config.input_dim:
        raise ConfigError(f"dataset dimension {ds.d} does not match checkpoint input_dim {model.config.input_dim}")
    mu, s2 = vae.encode_dataset(model, ds.images)
    table = metrics.RepresentationTable(mu, s2, ds.factor_indices, ds.grid)
    rep = metrics.evaluate_all(table, seed=args.seed or 0)
    text = rep.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_modify(args) -> int:
    cfg = _experiment(args)
    if cfg.pipeline is None:
        raise ConfigError("config has no 'pipeline' section")
    ds = _dataset(args, cfg)
    pool = next((m for m in cfg.models if m.name == cfg.pipeline.pool_model), None)
    if pool is None:
        raise ConfigError(f"pipeline.pool_model {cfg.pipeline.pool_model!r} is not a configured model")
    beta = cfg.pipeline.pool_beta if cfg.pipeline.pool_beta is not None else pool.betas[0]
    scored = []
    for seed in cfg.seeds:
        run = harness._train_cell(pool, beta, seed, ds, cfg.train)
        if run.failed:
            continue
        rec = harness._cell_record(harness.CellKey("original", pool.name, beta, seed), pool, run, ds, cfg)
        scored.append(manipulate.ScoredRun(run, rec["metrics"]["mig"], rec["active_units"], seed))
    modified, report = manipulate.run_modification_pipeline(ds, scored, cfg.pipeline.modification_config())
    out = Path(args.out)
    datagen.save_dataset(modified, out / "modified.dlab")
    harness._write_json(out / "pipeline_report.json", json.loads(report.to_json()))
    _emit({"dataset": str(out / "modified.dlab"), "final_loss_ent": report.final_loss_ent,
           "final_loss_dis": report.final_loss_dis, "max_linf": report.max_linf})
    return EXIT_OK


def cmd_noise(args) -> int:
    ds = datagen.load_dataset(args.data)
    noisy = manipulate.uniform_noise_modification(ds, args.epsilon, seed=args.seed or 0)
    out = datagen.save_dataset(noisy, args.out)
    _emit({"path": str(out), "epsilon_max": args.epsilon})
    return EXIT_OK


def cmd_verify_pca(args) -> int:
    cfg = harness.Theorem1Config.from_dict(_read_json(args.config)) if args.config else harness.Theorem1Config()
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    reports, path = harness.run_theorem1_suite(cfg, args.out)
    passed = sum(r.passed for r in reports)
    _emit({"passed": passed, "seeds": len(reports), "csv": str(path) if path else None,
           "distances": [r.distance for r in reports],
           "min_cosines": [min(r.cosines, default=0.0) for r in reports],
           "spearman": [r.spearman for r in reports]})
    return EXIT_OK


def _multipliers(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad multiplier list {text!r}") from exc


def cmd_linesearch(args) -> int:
    cfg = _experiment(args)
    path, rows = harness.line_search(cfg, _multipliers(args.multipliers), args.out, threads=args.threads)
    _emit({"csv": str(path), "rows": len(rows)})
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _experiment(args)
    res = harness.run_experiment(cfg, args.out, threads=args.threads)
    _emit({"run_dir": str(res.out_dir), "cells": len(res.records),
           "failed": sum(r["failed"] for r in res.records)})
    return EXIT_OK


def cmd_report(args) -> int:
    text, path = harness.emit_report(args.run_dir)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlab", description="Desk-scale disentanglement experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=True, out_required=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--out", required=out_required, help="output file or directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1, help="worker processes for independent cells")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a dataset file")
    p.add_argument("--kind", default="minisprites", choices=["minisprites", "grid_cloud", "linear_gaussian"])
    p.add_argument("--params", default="{}", help="dataset parameters as JSON")

    p = add("train", cmd_train, "train one model and write a checkpoint")
    p.add_argument("--data", help="DLAB1 dataset (defaults to the config's dataset)")
    p.add_argument("--model", help="model name from the config")
    p.add_argument("--beta", type=float, default=None)

    p = add("eval", cmd_eval, "score a checkpoint on a dataset", config=False, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = add("modify", cmd_modify, "run the adversarial modification pipeline")
    p.add_argument("--data")

    p = add("noise", cmd_noise, "uniform-noise baseline", config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--epsilon", type=float, default=0.1)

    add("verify-pca", cmd_verify_pca, "linear beta-VAE versus PCA suite", out_required=False)

    p = add("linesearch", cmd_linesearch, "scale betas over multipliers")
    p.add_argument("--multipliers", required=True, help="comma-separated, e.g. 0.5,1,2")

    add("run", cmd_run, "run a full experiment config")

    p = sub.add_parser("report", help="render markdown result tables from a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except (ConfigError, ReportError, datagen.DatasetFormatError, vae.T.DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
