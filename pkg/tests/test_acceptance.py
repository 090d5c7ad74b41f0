"""End-to-end acceptance checks, one test per criterion.

Every test prints a single ``[PASS]``/``[FAIL]`` line (also collected in the
terminal summary). The heavy experiments are module fixtures so that the
ordering, overpruning and reproducibility checks reuse the same runs.
"""
import math
import time

import numpy as np
import pytest

from conftest import record_acceptance
from dlab import datagen, harness, manipulate as M, metrics, pca, vae
from dlab import tensor as T
from dlab.harness import ExperimentConfig, Theorem1Config
from dlab.tensor import Value

LITERATURE_BETA = 8.0
LINESEARCH_MULTIPLIERS = [1 / 64, 1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2]
SEEDS = list(range(10))
DATASET = {"kind": "minisprites", "params": {"r": 16}}
TRAIN = {"steps": 5000, "lr": 1e-3, "batch_size": 64}

# Pool / retrain beta for the modification experiment: 8 x 1/16.
MODIFY_BETA = 0.5
PIPELINE = {"pool_model": "beta_vae", "epsilon_max": 0.5, "ensemble_size": 1, "steps": 2000,
            "lr": 1e-3, "decoder_lr": 1e-3, "batch_size": 64, "seed": 0, "noise_seed": 0}


def linesearch_config():
    return ExperimentConfig.from_dict({
        "name": "beta_linesearch", "dataset": DATASET, "seeds": SEEDS, "train": TRAIN,
        "models": [{"name": "beta_vae", "betas": [LITERATURE_BETA], "variants": ["original"]}],
    })


def autoencoder_config():
    return ExperimentConfig.from_dict({
        "name": "ae_baseline", "dataset": DATASET, "seeds": SEEDS, "train": TRAIN,
        "models": [{"name": "ae", "variational": False, "variants": ["original"]}],
    })


def modification_config():
    return ExperimentConfig.from_dict({
        "name": "modification", "dataset": DATASET, "seeds": SEEDS, "train": TRAIN,
        "models": [{"name": "beta_vae", "betas": [MODIFY_BETA]}], "pipeline": PIPELINE,
    })


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def dataset():
    return ExperimentConfig.from_dict({"dataset": DATASET, "models": [{"name": "m", "variants": ["original"]}]}
                                      ).dataset.build()


@pytest.fixture(scope="module")
def theorem_suite(workdir):
    (reports, path), seconds = timed(harness.run_theorem1_suite, Theorem1Config(), workdir / "theorem")
    return reports, path, seconds


@pytest.fixture(scope="module")
def line_search(workdir, dataset):
    (path, rows), seconds = timed(harness.line_search, linesearch_config(), LINESEARCH_MULTIPLIERS,
                                  workdir / "linesearch", dataset=dataset)
    return path, rows, seconds


@pytest.fixture(scope="module")
def autoencoder(workdir, dataset):
    return harness.run_experiment(autoencoder_config(), workdir / "ae", dataset=dataset)


@pytest.fixture(scope="module")
def modification(workdir, dataset):
    res, seconds = timed(harness.run_experiment, modification_config(), workdir / "modification",
                         dataset=dataset)
    return res, seconds


# ---------------------------------------------------------------------------
# 1-2: linear model against PCA


def test_criterion1_linear_vae_recovers_pca(theorem_suite):
    reports, _, seconds = theorem_suite
    cfg = Theorem1Config()
    spread = max(cfg.lambdas) / min(cfg.lambdas)
    ok = [r.distance < 0.05 and min(r.cosines) > 0.99 for r in reports]
    passed = sum(ok) >= 8 and seconds < 300 and cfg.d == 6 and spread >= 4
    detail = (f"{sum(ok)}/{len(reports)} seeds within tolerance, worst distance "
              f"{max(r.distance for r in reports):.4f}, worst cosine {min(min(r.cosines) for r in reports):.5f}, "
              f"{seconds:.0f}s")
    record_acceptance(1, "linear beta-VAE decoder SVD matches PCA", passed, detail)
    assert passed, detail


def test_criterion2_singular_values_ordered_by_noise(theorem_suite):
    reports, _, _ = theorem_suite
    rhos = [r.spearman for r in reports]
    passed = all(rho == 1.0 for rho in rhos)
    detail = f"spearman per seed {[round(r, 3) for r in rhos]}"
    record_acceptance(2, "singular values rank inversely with mean posterior variance", passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 3: auxiliary property suites


def test_criterion3_auxiliary_properties():
    rng = np.random.default_rng(2024)
    holds, iff = 0, 0
    for trial in range(1000):
        n = int(rng.integers(2, 8))
        if trial % 2:
            Q = datagen.random_orthonormal(n, trial)
            M_ = Q @ (rng.uniform(0.1, 10.0) * np.eye(n)) @ Q.T
            constant = True
        else:
            A = rng.normal(size=(n + int(rng.integers(0, 4)), n))
            M_ = A.T @ A
            constant = False
        t = pca.trace_inequality_check(M_)
        holds += t.holds
        iff += (abs(t.equality_gap) < 1e-9) == constant

    absorb = 0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        D = np.diag(rng.normal(size=n) * rng.uniform(0.1, 10))
        Mz = rng.normal(size=(n, n)) * rng.uniform(0.1, 10)
        np.fill_diagonal(Mz, 0.0)
        absorb += pca.diag_absorb_check(D, Mz, atol=1e-12)

    worst, gaps = 0.0, []
    for _ in range(1000):
        k = int(rng.integers(1, 9))
        x = rng.normal(size=k) * rng.uniform(0.05, 20)
        y = rng.uniform(0.1, 3.0, size=k)
        r = pca.optimal_latent_scale(x, y)
        sx = float(np.sum(x * x))
        worst = max(worst, abs(2 * r.c_numeric * sx - 2 * k / r.c_numeric))
        gaps.append(abs(r.discrepancy))

    passed = holds == 1000 and iff == 1000 and absorb == 1000 and worst < 1e-6
    detail = (f"trace holds {holds}/1000, equality-iff-constant {iff}/1000, diag-absorb {absorb}/1000, "
              f"worst stationarity residual {worst:.2e}; closed-form constant differs from the numeric "
              f"minimizer by median {np.median(gaps):.3g} (recorded, not asserted)")
    record_acceptance(3, "auxiliary matrix property suites", passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 4: gradient checks per model family


def _random_vae(rng, arch, variational):
    d, k = int(rng.integers(3, 8)), int(rng.integers(1, 4))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=2)) if arch == "mlp" else ()
    m = vae.VaeModel(vae.ModelConfig(arch=arch, input_dim=d, latent_dim=k, hidden=hidden,
                                     beta=float(rng.uniform(0.1, 4)), variational=variational),
                     seed=int(rng.integers(1 << 30)))
    for p in m.trainable_params:
        p.data += rng.normal(scale=0.3, size=p.data.shape)
    return m, d, k


def _vae_instance(rng, arch, variational):
    m, d, k = _random_vae(rng, arch, variational)
    b = int(rng.integers(2, 6))
    x, noise = rng.uniform(size=(b, d)), rng.normal(size=(b, k))
    beta = m.config.beta
    return (lambda: vae.loss_graph(m, Value(x), noise, beta)[0]), m.trainable_params


def _manipulator_instance(rng):
    ent, d, k = _random_vae(rng, "mlp", True)
    dis = vae.VaeModel(ent.config, seed=int(rng.integers(1 << 30)))
    # Fresh zero biases would put dead relu rows exactly on the kink.
    for p in dis.decoder_params:
        p.data += rng.normal(scale=0.3, size=p.data.shape)
    nf, b, S = int(rng.integers(2, 5)), int(rng.integers(2, 5)), 2
    manip = M.ManipulatorModel(nf, d, hidden=(4, 1, 5), seed=int(rng.integers(1 << 30)))
    for p in manip.params:
        p.data += rng.normal(scale=0.3, size=p.data.shape)
    x = rng.uniform(0.05, 0.95, size=(b, d))
    w = rng.uniform(size=(b, nf))
    z_ent, z_dis = rng.normal(size=(S * b, k)), rng.normal(size=(S * b, k))
    eps = float(rng.uniform(0.05, 0.5))

    def build():
        x_prime = M.reflect_unit(Value(x) + eps * manip(Value(w)))
        return M._rec_loss(ent, z_ent, x_prime, S) - M._rec_loss(dis, z_dis, x_prime, S)

    return build, manip.params + ent.decoder_params + dis.decoder_params


def test_criterion4_gradient_checks():
    rng = np.random.default_rng(4)
    families = {
        "linear VAE": lambda: _vae_instance(rng, "linear", True),
        "MLP VAE": lambda: _vae_instance(rng, "mlp", True),
        "autoencoder": lambda: _vae_instance(rng, "mlp", False),
        "manipulator": lambda: _manipulator_instance(rng),
    }
    worst = {}
    for name, make in families.items():
        errs = []
        for _ in range(20):
            build, params = make()
            errs.append(T.gradient_check(build, params).max_rel_error)
        worst[name] = max(errs)
    passed = all(e < 1e-4 for e in worst.values())
    detail = "worst relative error over 20 instances: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_acceptance(4, "loss gradients match central finite differences", passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 5: metric oracles


def _cell_sum_mi(a, b):
    n = len(a)
    total = 0.0
    for u in sorted(set(a.tolist())):
        in_u = a == u
        pu = in_u.sum() / n
        for v in sorted(set(b.tolist())):
            puv = np.sum(in_u & (b == v)) / n
            if puv > 0:
                total += puv * math.log(puv / (pu * (np.sum(b == v) / n)))
    return total


def test_criterion5_metric_oracles():
    rng = np.random.default_rng(5)
    worst_mi = 0.0
    for _ in range(200):
        la, lb = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        n = int(rng.integers(10, 500))
        a = rng.integers(0, la, n)
        b = rng.integers(0, lb, n) if rng.random() < 0.5 else (a + rng.integers(0, 3, n)) % lb
        worst_mi = max(worst_mi, abs(metrics.mutual_information(a, b) - _cell_sum_mi(a, b)))

    grid = datagen.default_minisprite_grid()
    w = grid.all_indices()
    s2 = np.full((len(w), 4), 0.01)
    planted = metrics.mig_score(metrics.RepresentationTable(w.astype(float), s2, w, grid))
    noise = metrics.mig_score(metrics.RepresentationTable(rng.normal(size=(len(w), 4)), s2, w, grid))
    passed = worst_mi < 1e-12 and abs(planted - 1.0) <= 0.02 and noise < 0.05
    detail = f"max |MI - cell-sum oracle| {worst_mi:.1e} on 200 tables, planted MIG {planted:.4f}, noise MIG {noise:.4f}"
    record_acceptance(5, "metric oracles", passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 6, 8: line search against the autoencoder baseline


def _selected_row(rows):
    # Best mean MIG among multipliers whose every run is usable.
    full = [r for r in rows if r["n_used"] == r["n_runs"] and r["mig_mean"] is not None]
    return max(full, key=lambda r: (r["mig_mean"], -r["multiplier"]))


def test_criterion6_beta_vae_beats_autoencoder(line_search, autoencoder):
    _, rows, _ = line_search
    best = _selected_row(rows)
    (ae_row,) = autoencoder.aggregate
    passed = best["n_used"] == 10 and best["mig_mean"] > ae_row["mig_mean"]
    table = ", ".join(f"x{r['multiplier']:g}: {r['mig_mean'] if r['mig_mean'] is None else round(r['mig_mean'], 3)}"
                      f" ({r['n_used']}/{r['n_runs']})" for r in rows)
    detail = (f"selected beta {best['beta']:g} (multiplier {best['multiplier']:g}) mean MIG "
              f"{best['mig_mean']:.3f} over {best['n_used']} seeds vs AE {ae_row['mig_mean']:.3f}; line search {table}")
    record_acceptance(6, "beta-VAE disentangles better than the plain autoencoder", passed, detail)
    assert passed, detail


def test_criterion8_overpruning_filter(line_search):
    _, rows, _ = line_search
    best = _selected_row(rows)
    high = [r for r in rows if r["multiplier"] >= 8 * best["multiplier"] - 1e-12]
    excluded = sum(r["n_overpruned"] for r in high)
    passed = bool(high) and excluded >= 1
    detail = (f"multipliers >= 8x selected: {[r['multiplier'] / best['multiplier'] for r in high]}, "
              f"overpruned runs excluded {[r['n_overpruned'] for r in high]}, "
              f"mean active units {[r['active_units_mean'] for r in high]}")
    record_acceptance(8, "overpruned runs are excluded at large beta", passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 7: the modification experiment


def test_criterion7_modification_lowers_mig(modification, dataset, workdir):
    res, seconds = modification
    eps = PIPELINE["epsilon_max"]
    by_variant = {v: [r for r in res.records if r["variant"] == v and not r["failed"]] for v in harness.VARIANTS}
    mig = {v: float(np.mean([r["metrics"]["mig"] for r in recs])) for v, recs in by_variant.items()}
    n = {v: len(recs) for v, recs in by_variant.items()}
    drop_mod = mig["original"] - mig["modified"]
    drop_noise = mig["original"] - mig["noise"]

    modified = res.datasets["modified"]
    linf = float(np.max(np.abs(modified.images - dataset.images)))
    stored = datagen.load_dataset(workdir / "modification" / "datasets" / "modified.dlab")
    factors_same = (np.array_equal(modified.factor_indices, dataset.factor_indices)
                    and np.array_equal(stored.factor_indices, dataset.factor_indices)
                    and modified.grid == dataset.grid and stored.grid == dataset.grid)
    report = res.pipeline_report
    filtered = {row["variant"]: row["mig_mean"] for row in res.aggregate}

    passed = (min(n.values()) >= 5 and drop_mod >= 0.05 and report.max_linf <= eps and linf <= eps + 1e-12
              and factors_same and drop_noise < drop_mod and seconds <= 7200)
    detail = (f"mean MIG orig {mig['original']:.3f} / mod {mig['modified']:.3f} / noise {mig['noise']:.3f} "
              f"over {n} seeds; drop mod {drop_mod:.3f}, noise {drop_noise:.3f}; max L-inf {report.max_linf:.3f} "
              f"<= {eps}; factors identical {factors_same}; L_ent {report.final_loss_ent:.2f} vs "
              f"L_dis {report.final_loss_dis:.2f}; overpruning-filtered means {filtered}; {seconds / 60:.1f} min")
    record_acceptance(7, "modified data lowers MIG more than uniform noise", passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 9: reproducibility


def test_criterion9_byte_identical_reruns(theorem_suite, autoencoder, line_search, workdir, dataset):
    _, thm_path, _ = theorem_suite
    _, thm_again = harness.run_theorem1_suite(Theorem1Config(), workdir / "theorem_rerun")
    ae_again = harness.run_experiment(autoencoder_config(), workdir / "ae_rerun", dataset=dataset)
    ls_path, _, _ = line_search
    small = [LINESEARCH_MULTIPLIERS[1]]
    ls_again, _ = harness.line_search(linesearch_config(), small, workdir / "linesearch_rerun", dataset=dataset)
    sub = f"x{small[0]:.6f}"
    same = {
        "theorem1.csv": thm_again.read_bytes() == thm_path.read_bytes(),
        "ae aggregate.csv": (ae_again.out_dir / "aggregate.csv").read_bytes()
        == (autoencoder.out_dir / "aggregate.csv").read_bytes(),
        f"linesearch {sub}/aggregate.csv": (workdir / "linesearch_rerun" / sub / "aggregate.csv").read_bytes()
        == (ls_path.parent / sub / "aggregate.csv").read_bytes(),
    }
    passed = all(same.values())
    record_acceptance(9, "reruns give byte-identical CSV", passed, str(same))
    assert passed, same
