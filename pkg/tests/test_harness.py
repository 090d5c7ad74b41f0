import csv
import json

import pytest

from dlab import harness, manipulate
from dlab.harness import ConfigError, ExperimentConfig, ReportError

TINY_GRID = [["shape", 2, 0.0, 1.0], ["scale", 2, 0.22, 0.3], ["pos_x", 3, 0.4, 0.6], ["pos_y", 3, 0.4, 0.6]]


def tiny_config(**overrides):
    data = {
        "dataset": {"kind": "minisprites", "params": {"r": 16, "grid": TINY_GRID}},
        "models": [{"name": "vae", "hidden": [16, 8], "betas": [0.5], "variants": ["original"]}],
        "seeds": [0, 1],
        "train": {"steps": 60, "batch_size": 16},
    }
    data.update(overrides)
    return data


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# config validation


def test_duplicate_seeds_rejected():
    with pytest.raises(ConfigError, match="duplicate seeds"):
        ExperimentConfig.from_dict(tiny_config(seeds=[0, 0]))


@pytest.mark.parametrize("where", ["top", "dataset", "models", "train", "pipeline"])
def test_unknown_keys_rejected(where):
    data = tiny_config()
    if where == "top":
        data["colour"] = 1
    elif where == "models":
        data["models"][0]["depth"] = 3
    elif where == "pipeline":
        data["pipeline"] = {"pool_model": "vae", "bogus": True}
    else:
        data[where]["bogus"] = True
    with pytest.raises(ConfigError, match="unknown keys"):
        ExperimentConfig.from_dict(data)


def test_config_value_errors():
    with pytest.raises(ConfigError, match="beta"):
        ExperimentConfig.from_dict(tiny_config(models=[{"name": "v", "betas": [0.0]}]))
    with pytest.raises(ConfigError, match="schema"):
        ExperimentConfig.from_dict(tiny_config(schema="other/2"))
    with pytest.raises(ConfigError, match="metrics"):
        ExperimentConfig.from_dict(tiny_config(metrics=["bvae"]))
    with pytest.raises(ConfigError, match="pipeline"):
        ExperimentConfig.from_dict(tiny_config(models=[{"name": "v", "variants": ["original", "noise"]}]))
    with pytest.raises(ConfigError, match="duplicate model"):
        ExperimentConfig.from_dict(tiny_config(models=[{"name": "v"}, {"name": "v"}]))


def test_autoencoder_betas_collapse_to_zero():
    cfg = ExperimentConfig.from_dict(tiny_config(models=[{"name": "ae", "variational": False, "betas": [4.0], "variants": ["original"]}]))
    assert cfg.models[0].betas == [0.0]
    assert cfg.scaled(8.0).models[0].betas == [0.0]


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config())
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert harness.load_config(path) == cfg
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        harness.load_config(path)


# ---------------------------------------------------------------------------
# runs


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return harness.run_experiment(ExperimentConfig.from_dict(tiny_config()), out)


def test_one_model_two_seeds_bookkeeping(tiny_run):
    out = tiny_run.out_dir
    assert sorted(p.name for p in (out / "runs" / "original").iterdir()) == [
        "vae__beta0.500000__seed0.json", "vae__beta0.500000__seed1.json"]
    rows = read_rows(out / "aggregate.csv")
    assert len(rows) == 1 and rows[0]["n_runs"] == "2"
    rec = json.loads((out / "runs" / "original" / "vae__beta0.500000__seed0.json").read_text())
    assert set(rec["metrics"]) == set(harness.METRICS)
    assert len(rec["mean_sigma2"]) == 4


def test_identical_config_gives_identical_csv(tiny_run, tmp_path):
    again = harness.run_experiment(ExperimentConfig.from_dict(tiny_config()), tmp_path)
    assert (again.out_dir / "aggregate.csv").read_bytes() == (tiny_run.out_dir / "aggregate.csv").read_bytes()


def test_parallel_cells_match_serial(tiny_run, tmp_path):
    par = harness.run_experiment(ExperimentConfig.from_dict(tiny_config()), tmp_path, threads=2)
    assert (par.out_dir / "aggregate.csv").read_bytes() == (tiny_run.out_dir / "aggregate.csv").read_bytes()


def test_aggregate_excludes_overpruned_and_failed():
    recs = [
        {"model": "m", "beta": 1.0, "variant": "original", "failed": False, "overpruned": False,
         "active_units": 4, "metrics": {"mig": 0.2}},
        {"model": "m", "beta": 1.0, "variant": "original", "failed": False, "overpruned": False,
         "active_units": 4, "metrics": {"mig": 0.4}},
        {"model": "m", "beta": 1.0, "variant": "original", "failed": False, "overpruned": True,
         "active_units": 2, "metrics": {"mig": 0.9}},
        {"model": "m", "beta": 1.0, "variant": "original", "failed": True, "overpruned": False,
         "active_units": None, "metrics": None},
    ]
    (row,) = harness.aggregate_records(recs, ["mig"])
    assert row["mig_mean"] == pytest.approx(0.3)
    assert row["mig_std"] == pytest.approx(0.1414213562, rel=1e-8)
    assert (row["n_runs"], row["n_used"], row["n_overpruned"], row["n_failed"]) == (4, 2, 1, 1)
    assert row["active_units_mean"] == pytest.approx(10 / 3)


def test_failed_cells_are_recorded(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(harness, "_train_cell", boom)
    with pytest.raises(harness.RunFailure):
        harness.run_experiment(ExperimentConfig.from_dict(tiny_config()), tmp_path)
    rec = json.loads((tmp_path / "runs" / "original" / "vae__beta0.500000__seed0.json").read_text())
    assert rec["failed"] and "diverged" in rec["error"]


def test_pipeline_variants_written(tmp_path, monkeypatch):
    data = tiny_config(
        models=[{"name": "vae", "hidden": [16, 8], "betas": [0.5]},
                {"name": "ae", "hidden": [16, 8], "variational": False, "variants": ["original"]}],
        seeds=[0, 1],
        pipeline={"pool_model": "vae", "epsilon_max": 0.2, "steps": 5, "batch_size": 8,
                  "manipulator_hidden": [4, 1, 8]})
    cfg = ExperimentConfig.from_dict(data)
    # A 60-step pool rarely keeps every unit active; drop the selection filter here.
    select = manipulate.select_extreme_runs
    monkeypatch.setattr(manipulate, "select_extreme_runs",
                        lambda runs, ensemble_size=1, num_factors=None: select(runs, ensemble_size, None))
    res = harness.run_experiment(cfg, tmp_path)
    assert (tmp_path / "datasets" / "modified.dlab").exists()
    assert (tmp_path / "datasets" / "noise.dlab").exists()
    report = json.loads((tmp_path / "pipeline_report.json").read_text())
    assert report["max_linf"] <= 0.2
    variants = {(r["model"], r["variant"]) for r in res.aggregate}
    assert variants == {("vae", "original"), ("vae", "modified"), ("vae", "noise"), ("ae", "original")}
    assert res.datasets["modified"].provenance == "modified"

    text, _ = harness.emit_report(tmp_path)
    ae_line = next(line for line in text.splitlines() if line.startswith("| ae |"))
    assert ae_line.count("--") == 2


# ---------------------------------------------------------------------------
# line search and report


def test_line_search_rows(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config(seeds=[0]))
    path, rows = harness.line_search(cfg, [0.5, 1, 2], tmp_path)
    csv_rows = read_rows(path)
    assert len(csv_rows) == 3
    assert [float(r["beta"]) for r in csv_rows] == [0.25, 0.5, 1.0]
    assert {"mig_mean", "sap_mean", "dci_d_mean", "factorvae_score_mean"} <= set(csv_rows[0])


@pytest.mark.parametrize("mults", [[], [0.0, 1.0], [1.0, 1.0]])
def test_line_search_rejects_bad_multipliers(mults, tmp_path):
    with pytest.raises(ConfigError):
        harness.line_search(ExperimentConfig.from_dict(tiny_config()), mults, tmp_path)


def test_report_cells(tmp_path):
    rows = [{"model": "ae", "beta": 0.0, "variant": "original", "n_runs": 3, "n_used": 3, "n_overpruned": 0,
             "n_failed": 0, "active_units_mean": 4.0, "mig_mean": 0.2345, "mig_std": 0.081}]
    harness.write_csv(tmp_path / "aggregate.csv", rows, harness.AGG_COLUMNS + ["mig_mean", "mig_std"])
    text, path = harness.emit_report(tmp_path)
    assert "| ae | 0.23 ± 0.08 | -- | -- |" in text
    assert (tmp_path / "report.md").read_text() == text
    assert len(read_rows(path)) == 3


def test_report_lists_exclusions(tmp_path):
    rows = [{"model": "vae", "beta": 2.0, "variant": "original", "n_runs": 3, "n_used": 1, "n_overpruned": 2,
             "n_failed": 0, "active_units_mean": 3.0, "mig_mean": 0.3, "mig_std": 0.0}]
    harness.write_csv(tmp_path / "aggregate.csv", rows, harness.AGG_COLUMNS + ["mig_mean", "mig_std"])
    text, _ = harness.emit_report(tmp_path)
    assert "| vae (beta=2) | 0.30 ± 0.00 |" in text
    assert "2 over-pruned" in text


def test_report_empty_directory_errors(tmp_path):
    with pytest.raises(ReportError):
        harness.emit_report(tmp_path)
    (tmp_path / "aggregate.csv").write_text(",".join(harness.AGG_COLUMNS) + "\n")
    with pytest.raises(ReportError):
        harness.emit_report(tmp_path)


# ---------------------------------------------------------------------------
# linear suite bookkeeping


def test_theorem_suite_small(tmp_path):
    cfg = harness.Theorem1Config(lambdas=[8.0, 4.0, 2.0, 1.0], d=4, n=500, latent_dim=2, steps=300, seeds=[0, 1])
    reports, path = harness.run_theorem1_suite(cfg, tmp_path)
    assert len(reports) == 2 and len(read_rows(path)) == 2
    assert (tmp_path / "theorem1" / "seed1.json").exists()
    _, again = harness.run_theorem1_suite(cfg, tmp_path / "b")
    assert again.read_bytes() == path.read_bytes()


def test_theorem_config_validation():
    with pytest.raises(ConfigError):
        harness.Theorem1Config(seeds=[1, 1])
    with pytest.raises(ConfigError):
        harness.Theorem1Config.from_dict({"lambdas": [1.0], "oops": 1})
