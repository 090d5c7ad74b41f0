"""Config-driven experiment runner: training grids, line searches and MIG result tables.

A run directory has this layout::

    config.json
    runs/<variant>/<model>__beta<b>__seed<s>.json
    datasets/<variant>.dlab          (modified / noise variants only)
    pipeline_report.json             (when a modified variant was built)
    aggregate.csv

Every float written to a CSV goes through :func:`_fmt`, and cells are merged in
sorted key order, so identical configs give byte-identical CSVs.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import datagen, metrics, pca
from . import manipulate as manip
from .vae import ModelConfig, TrainHyper, TrainedRun, VaeModel, train_model

log = logging.getLogger(__name__)

SCHEMA = "dlab.experiment/1"
THEOREM_SCHEMA = "dlab.theorem1/1"
METRICS = ("mig", "sap", "dci_d", "factorvae_score")
VARIANTS = ("original", "modified", "noise")
VARIANT_LABELS = {"original": "orig.", "modified": "mod.", "noise": "noise"}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class RunFailure(RuntimeError):
    """Every cell of an experiment failed (CLI exit code 1)."""


class ReportError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _strict(cls, data: Any, where: str):
    """Build dataclass ``cls`` from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DatasetSpec:
    kind: str = "minisprites"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("minisprites", "grid_cloud", "linear_gaussian"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")

    def build(self) -> datagen.LabeledDataset:
        return datagen.generate_dataset(self.kind, json.loads(json.dumps(self.params)), seed=self.seed)


@dataclass
class ModelSpec:
    name: str
    arch: str = "mlp"
    latent_dim: int = 4
    hidden: list = field(default_factory=lambda: [128, 64])
    betas: list = field(default_factory=lambda: [1.0])
    variational: bool = True
    variants: list = field(default_factory=lambda: list(VARIANTS))

    def __post_init__(self):
        if not self.name or "__" in self.name or "/" in self.name:
            raise ValueError(f"model name {self.name!r} must be non-empty without '__' or '/'")
        if not self.betas:
            raise ValueError(f"model {self.name}: betas list is empty")
        self.betas = [float(b) for b in self.betas]
        if self.variational and any(b <= 0 for b in self.betas):
            raise ValueError(f"model {self.name}: beta must be > 0 for variational models")
        if not self.variational:
            self.betas = [0.0]
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"model {self.name}: unknown variants {bad}")
        ModelConfig(arch=self.arch, latent_dim=self.latent_dim, hidden=tuple(self.hidden))

    def model_config(self, input_dim: int, beta: float) -> ModelConfig:
        return ModelConfig(arch=self.arch, input_dim=input_dim, latent_dim=self.latent_dim,
                           hidden=tuple(self.hidden), beta=beta, variational=self.variational)


@dataclass
class TrainSpec:
    steps: int = 5000
    lr: float = 1e-3
    batch_size: int = 64

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps and batch_size must be >= 1 and lr > 0")


@dataclass
class PipelineSpec:
    """Options of the modification pipeline; the pool model's original runs feed the selection."""

    pool_model: str = ""
    pool_beta: float | None = None
    epsilon_max: float = 0.1
    ensemble_size: int = 1
    decoder_batches_per_manip_batch: int = 3
    latent_samples_per_image: int = 5
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-4
    decoder_lr: float = 1e-4
    seed: int = 0
    noise_seed: int = 0
    manipulator_hidden: list = field(default_factory=lambda: [16, 1, 128, 256])

    def __post_init__(self):
        self.modification_config()

    def modification_config(self) -> manip.ModificationConfig:
        return manip.ModificationConfig(
            epsilon_max=self.epsilon_max, ensemble_size=self.ensemble_size,
            decoder_batches_per_manip_batch=self.decoder_batches_per_manip_batch,
            latent_samples_per_image=self.latent_samples_per_image, steps=self.steps,
            batch_size=self.batch_size, lr=self.lr, decoder_lr=self.decoder_lr, seed=self.seed,
            manipulator_hidden=tuple(self.manipulator_hidden))


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    models: list
    seeds: list = field(default_factory=lambda: list(range(10)))
    metrics: list = field(default_factory=lambda: list(METRICS))
    train: TrainSpec = field(default_factory=TrainSpec)
    pipeline: PipelineSpec | None = None
    output_dir: str = "runs"
    active_threshold: float = 0.8
    bins: int = 20
    schema: str = SCHEMA
    name: str = "experiment"

    def __post_init__(self):
        if self.schema != SCHEMA:
            raise ConfigError(f"unsupported schema {self.schema!r}; expected {SCHEMA!r}")
        if not self.seeds:
            raise ConfigError("seeds list is empty")
        if any(not isinstance(s, int) or isinstance(s, bool) for s in self.seeds):
            raise ConfigError("seeds must be integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {self.seeds}")
        if not self.models:
            raise ConfigError("models list is empty")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate model names in {names}")
        bad = [m for m in self.metrics if m not in METRICS]
        if bad or not self.metrics:
            raise ConfigError(f"metrics must be a non-empty subset of {list(METRICS)}, got {self.metrics}")
        needs_pipeline = any("modified" in m.variants or "noise" in m.variants for m in self.models)
        if needs_pipeline:
            if self.pipeline is None:
                raise ConfigError("modified/noise variants need a 'pipeline' section")
            pool = [m for m in self.models if m.name == self.pipeline.pool_model]
            if not pool:
                raise ConfigError(f"pipeline.pool_model {self.pipeline.pool_model!r} is not a configured model")
            if not pool[0].variational:
                raise ConfigError("pipeline.pool_model must be a variational model")
            if self.pipeline.pool_beta is not None and self.pipeline.pool_beta not in pool[0].betas:
                raise ConfigError(f"pipeline.pool_beta {self.pipeline.pool_beta} is not among the pool model's betas")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        known = {f.name for f in fields(cls)}
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigError(f"config: unknown keys {extra}")
        if "dataset" not in data or "models" not in data:
            raise ConfigError("config needs 'dataset' and 'models'")
        data["dataset"] = _strict(DatasetSpec, data["dataset"], "dataset")
        if not isinstance(data["models"], list):
            raise ConfigError("models must be a list")
        data["models"] = [_strict(ModelSpec, m, f"models[{i}]") for i, m in enumerate(data["models"])]
        if "train" in data:
            data["train"] = _strict(TrainSpec, data["train"], "train")
        if data.get("pipeline") is not None:
            data["pipeline"] = _strict(PipelineSpec, data["pipeline"], "pipeline")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def scaled(self, multiplier: float) -> "ExperimentConfig":
        """Copy with every variational beta multiplied by ``multiplier``."""
        models = [replace(m, betas=[b * multiplier for b in m.betas]) if m.variational else m
                  for m in self.models]
        pipe = self.pipeline
        if pipe is not None and pipe.pool_beta is not None:
            pipe = replace(pipe, pool_beta=pipe.pool_beta * multiplier)
        return replace(self, models=models, pipeline=pipe)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# cells


@dataclass(frozen=True, order=True)
class CellKey:
    variant: str
    model: str
    beta: float
    seed: int

    @property
    def filename(self) -> str:
        return f"{self.model}__beta{_fmt(self.beta)}__seed{self.seed}.json"


def _fmt(x: float) -> str:
    return f"{float(x):.6f}"


def _train_cell(spec: ModelSpec, beta: float, seed: int, ds: datagen.LabeledDataset,
                train: TrainSpec) -> TrainedRun:
    model = VaeModel(spec.model_config(ds.d, beta), seed=seed)
    hyper = TrainHyper(beta=beta, lr=train.lr, batch_size=train.batch_size, steps=train.steps, seed=seed)
    return train_model(model, ds.images, hyper)


def _score(run: TrainedRun, ds: datagen.LabeledDataset, cfg: ExperimentConfig) -> metrics.MetricReport:
    table = metrics.RepresentationTable(run.mu, run.sigma2, ds.factor_indices, ds.grid)
    return metrics.evaluate_all(table, bins=cfg.bins, seed=run.seed, active_threshold=cfg.active_threshold)


def _cell_record(key: CellKey, spec: ModelSpec, run: TrainedRun, ds: datagen.LabeledDataset,
                 cfg: ExperimentConfig) -> dict:
    record: dict[str, Any] = {"variant": key.variant, "model": key.model, "beta": key.beta,
                              "seed": key.seed, "failed": run.failed, "failed_step": run.failed_step,
                              "monotone_flag": run.monotone_flag}
    if run.failed:
        record.update({"overpruned": False, "active_units": None, "metrics": None})
        return record
    rep = _score(run, ds, cfg)
    n_w = ds.grid.num_factors
    record.update({
        "active_units": rep.active_units,
        "overpruned": bool(spec.variational and rep.active_units < n_w),
        "metrics": {m: getattr(rep, m) for m in cfg.metrics},
        "mi_matrix": rep.mi_matrix,
        "mean_sigma2": run.mean_sigma2.tolist(),
        "final_loss": float(np.mean(run.losses[-100:])) if run.losses else None,
    })
    return record


def _run_cell(args) -> tuple[CellKey, dict, TrainedRun | None]:
    key, spec, ds, cfg, keep = args
    try:
        run = _train_cell(spec, key.beta, key.seed, ds, cfg.train)
        record = _cell_record(key, spec, run, ds, cfg)
    except Exception as exc:  # recorded per cell; the experiment continues
        log.exception("cell %s failed", key)
        run = None
        record = {"variant": key.variant, "model": key.model, "beta": key.beta, "seed": key.seed,
                  "failed": True, "failed_step": None, "error": repr(exc), "overpruned": False,
                  "active_units": None, "metrics": None, "monotone_flag": False}
    return key, record, (run if keep else None)


def _execute(jobs: list, threads: int) -> list:
    if threads <= 1 or len(jobs) <= 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_cell, jobs))


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# aggregation


AGG_COLUMNS = ["model", "beta", "variant", "n_runs", "n_used", "n_overpruned", "n_failed",
               "active_units_mean"]


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate_records(records: Iterable[dict], metric_names: Sequence[str],
                      group_keys: Sequence[str] = ("model", "beta", "variant")) -> list[dict]:
    """Mean/std per group over runs that neither failed nor over-pruned."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for rec in records:
        groups[tuple(rec[k] for k in group_keys)].append(rec)
    rows = []
    for gk in sorted(groups, key=lambda t: tuple((str(type(x)), x) for x in t)):
        recs = groups[gk]
        used = [r for r in recs if not r["failed"] and not r["overpruned"]]
        row: dict[str, Any] = dict(zip(group_keys, gk))
        row.update(n_runs=len(recs), n_used=len(used),
                   n_overpruned=sum(bool(r["overpruned"]) for r in recs),
                   n_failed=sum(bool(r["failed"]) for r in recs))
        au = [r["active_units"] for r in recs if r["active_units"] is not None]
        row["active_units_mean"] = float(np.mean(au)) if au else None
        for m in metric_names:
            vals = [r["metrics"][m] for r in used]
            row[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{m}_std"] = _std(vals) if vals else None
        rows.append(row)
    return rows


def write_csv(path: Path, rows: list[dict], columns: Sequence[str]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        out = []
        for c in columns:
            v = row.get(c)
            if v is None:
                out.append("")
            elif isinstance(v, bool) or isinstance(v, (int, np.integer)) or isinstance(v, str):
                out.append(str(v))
            else:
                out.append(_fmt(v))
        writer.writerow(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue().encode())
    return path


def _metric_columns(metric_names: Sequence[str]) -> list[str]:
    return [c for m in metric_names for c in (f"{m}_mean", f"{m}_std")]


# ---------------------------------------------------------------------------
# run_config


@dataclass
class ExperimentResult:
    out_dir: Path
    records: list[dict]
    aggregate: list[dict]
    pipeline_report: manip.PipelineReport | None = None
    datasets: dict = field(default_factory=dict)


def _variant_datasets(cfg: ExperimentConfig, ds: datagen.LabeledDataset, pool_runs: dict[int, TrainedRun],
                      pool_records: dict[int, dict], needed: set[str], out_dir: Path):
    datasets = {"original": ds}
    report = None
    pipe = cfg.pipeline
    if "modified" in needed:
        scored = [manip.ScoredRun(pool_runs[s], pool_records[s]["metrics"]["mig"],
                                  pool_records[s]["active_units"], s)
                  for s in sorted(pool_runs) if not pool_records[s]["failed"]]
        modified, report = manip.run_modification_pipeline(ds, scored, pipe.modification_config())
        datasets["modified"] = modified
        _write_json(out_dir / "pipeline_report.json", json.loads(report.to_json()))
    if "noise" in needed:
        datasets["noise"] = manip.uniform_noise_modification(ds, pipe.epsilon_max, seed=pipe.noise_seed)
    for name, d in datasets.items():
        if name != "original":
            datagen.save_dataset(d, out_dir / "datasets" / f"{name}.dlab")
    return datasets, report


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, threads: int = 1,
                   dataset: datagen.LabeledDataset | None = None) -> ExperimentResult:
    """Train every (variant, model, beta, seed) cell, write run JSONs and ``aggregate.csv``."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    ds = dataset if dataset is not None else cfg.dataset.build()
    if ds.grid.num_factors == 0:
        raise ConfigError("experiments need a dataset with a factor grid")

    specs = {m.name: m for m in cfg.models}
    keys = sorted(CellKey(v, m.name, b, s) for m in cfg.models for v in m.variants
                  for b in m.betas for s in cfg.seeds)
    needed = {k.variant for k in keys} - {"original"}

    pool_keys: set[CellKey] = set()
    if needed:
        pool = specs[cfg.pipeline.pool_model]
        beta = cfg.pipeline.pool_beta if cfg.pipeline.pool_beta is not None else pool.betas[0]
        pool_keys = {CellKey("original", pool.name, beta, s) for s in cfg.seeds}
        keys = sorted(set(keys) | pool_keys)

    results: dict[CellKey, dict] = {}
    runs: dict[CellKey, TrainedRun] = {}
    first = [(k, specs[k.model], ds, cfg, k in pool_keys) for k in keys if k.variant == "original"]
    for key, rec, run in _execute(first, threads):
        results[key] = rec
        if run is not None:
            runs[key] = run

    report = None
    datasets = {"original": ds}
    if needed:
        pool_runs = {k.seed: runs[k] for k in pool_keys if k in runs}
        pool_records = {k.seed: results[k] for k in pool_keys}
        if not pool_runs:
            raise RunFailure("every pool run failed; cannot build the modified dataset")
        datasets, report = _variant_datasets(cfg, ds, pool_runs, pool_records, needed, out)
        rest = [(k, specs[k.model], datasets[k.variant], cfg, False) for k in keys if k.variant != "original"]
        for key, rec, _ in _execute(rest, threads):
            results[key] = rec

    records = []
    for key in sorted(results):
        rec = results[key]
        _write_json(out / "runs" / key.variant / key.filename, rec)
        records.append(rec)
    if all(r["failed"] for r in records):
        raise RunFailure("every cell failed")
    agg = aggregate_records(records, cfg.metrics)
    write_csv(out / "aggregate.csv", agg, AGG_COLUMNS + _metric_columns(cfg.metrics))
    return ExperimentResult(out, records, agg, report, datasets)


def run_config(path: str | Path, out_dir: str | Path | None = None, threads: int = 1) -> Path:
    cfg = load_config(path)
    return run_experiment(cfg, out_dir, threads).out_dir


# ---------------------------------------------------------------------------
# line search


LINESEARCH_COLUMNS = ["multiplier", "model", "beta", "n_runs", "n_used", "n_overpruned", "n_failed",
                      "active_units_mean"]


def line_search(cfg: ExperimentConfig, multipliers: Sequence[float], out_dir: str | Path | None = None,
                parameter: str = "beta", threads: int = 1,
                dataset: datagen.LabeledDataset | None = None) -> tuple[Path, list[dict]]:
    """Scale the variational betas by each multiplier and train on the original data only."""
    if parameter != "beta":
        raise ConfigError(f"line search supports parameter 'beta' only, got {parameter!r}")
    multipliers = [float(m) for m in multipliers]
    if not multipliers:
        raise ConfigError("line search needs at least one multiplier")
    if any(m <= 0 for m in multipliers):
        raise ConfigError(f"multipliers must be positive, got {multipliers}")
    if len(set(multipliers)) != len(multipliers):
        raise ConfigError(f"duplicate multipliers in {multipliers}")
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    ds = dataset if dataset is not None else cfg.dataset.build()
    base = [replace(m, variants=["original"]) for m in cfg.models if m.variational]
    if not base:
        raise ConfigError("line search needs at least one variational model")
    rows = []
    for mult in multipliers:
        sub = replace(cfg, models=base, pipeline=None).scaled(mult)
        res = run_experiment(sub, out / f"x{_fmt(mult)}", threads, dataset=ds)
        for row in res.aggregate:
            rows.append({"multiplier": mult, **row})
    columns = LINESEARCH_COLUMNS + _metric_columns(cfg.metrics)
    path = write_csv(out / "linesearch.csv", rows, columns)
    return path, rows


# ---------------------------------------------------------------------------
# report


def _cell_text(mean, std) -> str:
    if mean is None or mean == "":
        return "--"
    return f"{float(mean):.2f} ± {float(std or 0.0):.2f}"


def _read_aggregate(run_dir: Path) -> list[dict]:
    path = run_dir / "aggregate.csv"
    if not run_dir.is_dir() or not path.exists():
        raise ReportError(f"{run_dir}: no aggregate.csv; run the experiment first")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ReportError(f"{path}: aggregate is empty")
    return rows


def emit_report(run_dir: str | Path, metric_names: Sequence[str] | None = None) -> tuple[str, Path]:
    """Markdown tables (one per metric) with models as rows and data variants as columns."""
    run_dir = Path(run_dir)
    rows = _read_aggregate(run_dir)
    available = [m for m in METRICS if f"{m}_mean" in rows[0]]
    metric_names = list(metric_names or available)
    cells: dict[tuple[str, str], dict] = {}
    row_keys: list[str] = []
    for r in rows:
        label = r["model"] if float(r["beta"]) == 0 else f"{r['model']} (beta={float(r['beta']):g})"
        if label not in row_keys:
            row_keys.append(label)
        cells[(label, r["variant"])] = r

    lines = []
    csv_rows = []
    for m in metric_names:
        lines.append(f"### {m}")
        lines.append("")
        lines.append("| model | " + " | ".join(VARIANT_LABELS[v] for v in VARIANTS) + " |")
        lines.append("|---|" + "---|" * len(VARIANTS))
        for label in row_keys:
            texts = []
            for v in VARIANTS:
                c = cells.get((label, v))
                text = _cell_text(c.get(f"{m}_mean") if c else None, c.get(f"{m}_std") if c else None)
                texts.append(text)
                csv_rows.append({"metric": m, "model": label, "variant": v, "cell": text})
            lines.append(f"| {label} | " + " | ".join(texts) + " |")
        lines.append("")
    excluded = [f"{label} / {v}: {c['n_overpruned']} over-pruned, {c['n_failed']} failed of {c['n_runs']}"
                for (label, v), c in cells.items() if int(c["n_overpruned"]) or int(c["n_failed"])]
    if excluded:
        lines.append("Excluded runs: " + "; ".join(excluded))
        lines.append("")
    text = "\n".join(lines)
    (run_dir / "report.md").write_text(text)
    path = write_csv(run_dir / "report.csv", csv_rows, ["metric", "model", "variant", "cell"])
    return text, path


# ---------------------------------------------------------------------------
# linear-VAE / PCA suite


@dataclass
class Theorem1Config:
    lambdas: list = field(default_factory=lambda: [32.0, 16.0, 8.0, 4.0, 2.0, 1.0])
    d: int = 6
    n: int = 4000
    latent_dim: int = 4
    beta: float = 1.0
    steps: int = 30000
    lr: float = 1e-2
    batch_size: int = 64
    seeds: list = field(default_factory=lambda: list(range(10)))
    max_distance: float = 0.05
    min_cosine: float = 0.99
    schema: str = THEOREM_SCHEMA

    def __post_init__(self):
        if self.schema != THEOREM_SCHEMA:
            raise ConfigError(f"unsupported schema {self.schema!r}; expected {THEOREM_SCHEMA!r}")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError(f"seeds must be a non-empty list of distinct integers, got {self.seeds}")
        if len(set(self.lambdas)) != len(self.lambdas):
            raise ConfigError("lambdas must be distinct")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "Theorem1Config":
        return _strict(cls, data, "theorem1 config")


THEOREM_COLUMNS = ["seed", "passed", "inconclusive", "distance", "min_cosine", "spearman",
                   "n_active", "singular_values", "mean_sigma2"]


def run_theorem1_suite(cfg: Theorem1Config, out_dir: str | Path | None = None) -> tuple[list[pca.Theorem1Report], Path | None]:
    """Train one linear beta-VAE per seed and check its decoder against PCA."""
    tol = pca.Theorem1Tolerances(max_distance=cfg.max_distance, min_cosine=cfg.min_cosine)
    reports, rows = [], []
    for seed in cfg.seeds:
        ds = datagen.generate_dataset("linear_gaussian", {"lambdas": list(cfg.lambdas), "d": cfg.d, "n": cfg.n},
                                      seed=seed)
        model = VaeModel(ModelConfig(arch="linear", input_dim=cfg.d, latent_dim=cfg.latent_dim,
                                     beta=cfg.beta), seed=seed)
        train_model(model, ds.images, TrainHyper(steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size,
                                                 seed=seed))
        rep = pca.verify_theorem1(model, ds, tol)
        reports.append(rep)
        rows.append({"seed": seed, "passed": rep.passed, "inconclusive": rep.inconclusive,
                     "distance": rep.distance, "min_cosine": min(rep.cosines, default=0.0),
                     "spearman": rep.spearman, "n_active": len(rep.active),
                     "singular_values": " ".join(_fmt(s) for s in rep.singular_values),
                     "mean_sigma2": " ".join(_fmt(s) for s in rep.mean_sigma2)})
    path = None
    if out_dir is not None:
        out = Path(out_dir)
        _write_json(out / "theorem1_config.json", asdict(cfg))
        for rep, seed in zip(reports, cfg.seeds):
            _write_json(out / "theorem1" / f"seed{seed}.json", json.loads(rep.to_json()))
        path = write_csv(out / "theorem1.csv", rows, THEOREM_COLUMNS)
    return reports, path
