"""Adversarial, L-infinity bounded dataset modification and the uniform-noise baseline.

The pipeline keeps two pretrained beta-VAEs: one whose latent space is the most
disentangled over a set of restarts and one that is the most entangled. Their
encoders stay frozen and always see the *original* images. A factor-conditioned
network ``m(w)`` proposes an additive perturbation ``x' = x + eps * m(w)``; the
two decoders are retrained to reconstruct ``x'`` while ``m`` is trained to make
``x'`` cheap to reconstruct from the entangled code and expensive from the
disentangled one.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .datagen import LabeledDataset
from .tensor import Value
from .vae import Dense, TrainedRun, VaeModel, param_digest

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# image normalisation and noise baseline


def reflect_unit(x):
    """Graph version of the reflection ``x - 2 relu(x - 1) + 2 relu(-x)``."""
    return x - 2.0 * T.relu(x - 1.0) + 2.0 * T.relu(-1.0 * x)


def normalize_image(x: np.ndarray) -> np.ndarray:
    """Reflect values from ``[-1, 2]`` back into ``[0, 1]``."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < -1.0) or np.any(x > 2.0):
        raise ValueError("normalize_image expects entries in [-1, 2]")
    return x - 2.0 * np.maximum(x - 1.0, 0.0) + 2.0 * np.maximum(-x, 0.0)


def uniform_noise_modification(ds: LabeledDataset, epsilon_max: float, seed: int = 0) -> LabeledDataset:
    if not 0.0 <= epsilon_max < 1.0:
        raise ValueError(f"epsilon_max must lie in [0, 1), got {epsilon_max}")
    rng = np.random.default_rng(seed)
    u = rng.uniform(-epsilon_max, epsilon_max, ds.images.shape)
    meta = {**ds.meta, "noise_epsilon": epsilon_max, "noise_seed": seed}
    return ds.replace(images=normalize_image(ds.images + u), provenance="noise", meta=meta)


# ---------------------------------------------------------------------------
# manipulator network


class ManipulatorModel:
    """``w -> tanh(...)`` image-sized MLP with a one-unit bottleneck after the first layer."""

    def __init__(self, num_factors: int, output_dim: int, hidden: Sequence[int] = (16, 1, 128, 256),
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        sizes = [num_factors, *hidden, output_dim]
        self.layers = [Dense(a, b, rng, f"manip{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.bottleneck = list(hidden).index(1) if 1 in hidden else -1
        self.num_factors = num_factors
        self.output_dim = output_dim

    @property
    def params(self) -> list[Value]:
        return [p for layer in self.layers for p in layer.params]

    def __call__(self, w) -> Value:
        h = T.as_value(w)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i == last:
                h = T.tanh(h)
            elif i != self.bottleneck:
                h = T.relu(h)
        return h

    def perturbation(self, w: np.ndarray) -> np.ndarray:
        return self(Value(w)).data

    def zero_output(self) -> None:
        """Make ``m(w) = 0`` for every ``w`` (a no-op manipulation)."""
        self.layers[-1].W.data[:] = 0.0
        self.layers[-1].b.data[:] = 0.0


@dataclass
class ModificationConfig:
    epsilon_max: float = 0.1
    ensemble_size: int = 1
    decoder_batches_per_manip_batch: int = 3
    latent_samples_per_image: int = 5
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-4
    decoder_lr: float = 1e-4
    seed: int = 0
    manipulator_hidden: tuple[int, ...] = (16, 1, 128, 256)

    def __post_init__(self):
        if not 0.0 < self.epsilon_max < 1.0:
            raise ValueError(f"epsilon_max must lie in (0, 1), got {self.epsilon_max}")
        if self.ensemble_size < 1 or self.decoder_batches_per_manip_batch < 1 or self.latent_samples_per_image < 1:
            raise ValueError("ensemble_size, decoder_batches_per_manip_batch and latent_samples_per_image must be >= 1")
        self.manipulator_hidden = tuple(self.manipulator_hidden)


# ---------------------------------------------------------------------------
# pipeline stages


@dataclass
class ScoredRun:
    run: TrainedRun
    mig: float
    active_units: int
    seed: int


def select_extreme_runs(runs: Sequence[ScoredRun], ensemble_size: int = 1,
                        num_factors: int | None = None) -> tuple[list[ScoredRun], list[ScoredRun]]:
    """Top ``ensemble_size`` runs by MIG (disentangled) and bottom ones (entangled).

    Runs whose active-unit count sinks below ``num_factors`` are skipped; ties in
    MIG are broken by seed order.
    """
    if len(runs) < 2:
        raise ValueError("need at least two runs to pick extremes")
    pool = [r for r in runs if num_factors is None or r.active_units >= num_factors]
    if not pool:
        raise PipelineError("every run over-pruned its latent space")
    if 2 * ensemble_size > len(pool):
        raise ValueError(
            f"ensemble_size {ensemble_size} needs {2 * ensemble_size} distinct runs, only {len(pool)} usable")
    disentangled = sorted(pool, key=lambda r: (-r.mig, r.seed))[:ensemble_size]
    entangled = sorted(pool, key=lambda r: (r.mig, r.seed))[:ensemble_size]
    return disentangled, entangled


@dataclass
class _Pair:
    """Frozen encoder outputs on the original images plus a trainable decoder copy."""

    model: VaeModel
    mu: np.ndarray
    logvar: np.ndarray
    opt: T.Adam

    @classmethod
    def from_run(cls, run: TrainedRun, images: np.ndarray, lr: float) -> "_Pair":
        model = run.model.copy()
        mu, logvar = model.encode_numpy(images)
        return cls(model, mu, logvar, T.Adam(model.decoder_params, lr=lr, eps=1e-7))


def _sample_latents(mu: np.ndarray, logvar: np.ndarray, samples: int, rng) -> np.ndarray:
    b, k = mu.shape
    eps = rng.standard_normal((samples, b, k))
    return (mu[None] + np.exp(0.5 * logvar)[None] * eps).reshape(samples * b, k)


def _rec_loss(model: VaeModel, z: np.ndarray, target, samples: int) -> Value:
    """Mean over images and latent samples of the squared reconstruction error."""
    recon = model.decode(Value(z))
    if isinstance(target, Value):
        target = T.concatenate([target] * samples, axis=0) if samples > 1 else target
    else:
        target = Value(np.tile(target, (samples, 1)))
    return T.mean(T.sum(T.square(recon - target), axis=1))


def retrain_decoders(pairs: Sequence[_Pair], targets: np.ndarray, idx: np.ndarray, samples: int,
                     rng) -> list[float]:
    """One optimisation step for every decoder on manipulated targets ``targets[idx]``."""
    losses = []
    for pair in pairs:
        z = _sample_latents(pair.mu[idx], pair.logvar[idx], samples, rng)
        loss = _rec_loss(pair.model, z, targets[idx], samples)
        T.backward(loss)
        pair.opt.step()
        losses.append(loss.item())
    return losses


def manipulated(manip: ManipulatorModel, images: np.ndarray, w_unit: np.ndarray, epsilon: float) -> np.ndarray:
    return normalize_image(images + epsilon * manip.perturbation(w_unit))


@dataclass
class PipelineReport:
    final_loss_ent: float
    final_loss_dis: float
    initial_loss_ent: float
    initial_loss_dis: float
    max_linf: float
    epsilon_max: float
    encoder_digests_unchanged: bool
    disentangled_seeds: list[int]
    entangled_seeds: list[int]
    disentangled_migs: list[float]
    entangled_migs: list[float]
    manip_losses: list[float] = field(default_factory=list)
    failed: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate_pairs(pairs: Sequence[_Pair], targets: np.ndarray, samples: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    total = 0.0
    for start in range(0, len(targets), 256):
        idx = np.arange(start, min(start + 256, len(targets)))
        for pair in pairs:
            z = _sample_latents(pair.mu[idx], pair.logvar[idx], samples, rng)
            recon = pair.model.decode_numpy(z)
            err = recon - np.tile(targets[idx], (samples, 1))
            total += float(np.sum(err * err)) / samples
    return total / (len(targets) * len(pairs))


def train_manipulator(manip: ManipulatorModel, ent: Sequence[_Pair], dis: Sequence[_Pair],
                      ds: LabeledDataset, config: ModificationConfig) -> list[float]:
    """Alternate decoder refits with manipulator steps minimising ``L_ent - L_dis``."""
    rng = np.random.default_rng(config.seed)
    images = ds.images
    w_unit = ds.grid.unit_coordinates(ds.factor_indices)
    n = len(images)
    bs = min(config.batch_size, n)
    S = config.latent_samples_per_image
    opt = T.Adam(manip.params, lr=config.lr, eps=1e-7)
    history = []
    for step in range(config.steps):
        for _ in range(config.decoder_batches_per_manip_batch):
            idx = rng.choice(n, size=bs, replace=False)
            targets = np.zeros_like(images)
            targets[idx] = manipulated(manip, images[idx], w_unit[idx], config.epsilon_max)
            retrain_decoders([*ent, *dis], targets, idx, S, rng)
        idx = rng.choice(n, size=bs, replace=False)
        x_prime = reflect_unit(Value(images[idx]) + config.epsilon_max * manip(Value(w_unit[idx])))
        l_ent = sum((_rec_loss(p.model, _sample_latents(p.mu[idx], p.logvar[idx], S, rng), x_prime, S)
                     for p in ent), Value(0.0))
        l_dis = sum((_rec_loss(p.model, _sample_latents(p.mu[idx], p.logvar[idx], S, rng), x_prime, S)
                     for p in dis), Value(0.0))
        loss_m = (l_ent - l_dis) * (1.0 / len(ent))
        value = loss_m.item()
        if not np.isfinite(value):
            raise PipelineError(f"manipulator loss diverged at step {step}")
        history.append(value)
        # Decoder grads from this graph are discarded; only m is stepped here.
        T.backward(loss_m)
        opt.step()
        for p in [*ent, *dis]:
            p.opt.zero_grad()
    return history


def run_modification_pipeline(ds: LabeledDataset, runs: Sequence[ScoredRun],
                              config: ModificationConfig) -> tuple[LabeledDataset, PipelineReport]:
    """Select extremes, train the manipulator, and apply it to every grid point."""
    dis_runs, ent_runs = select_extreme_runs(runs, config.ensemble_size, ds.grid.num_factors)
    images = ds.images
    w_unit = ds.grid.unit_coordinates(ds.factor_indices)
    ent = [_Pair.from_run(r.run, images, config.decoder_lr) for r in ent_runs]
    dis = [_Pair.from_run(r.run, images, config.decoder_lr) for r in dis_runs]
    digests = [param_digest(p.model.encoder_params) for p in [*ent, *dis]]
    S = config.latent_samples_per_image

    manip = ManipulatorModel(ds.grid.num_factors, ds.d, config.manipulator_hidden, seed=config.seed)
    init_ent = evaluate_pairs(ent, images, S, config.seed)
    init_dis = evaluate_pairs(dis, images, S, config.seed)
    history = train_manipulator(manip, ent, dis, ds, config)

    delta = config.epsilon_max * manip.perturbation(w_unit)
    modified = normalize_image(images + delta)
    final_ent = evaluate_pairs(ent, modified, S, config.seed)
    final_dis = evaluate_pairs(dis, modified, S, config.seed)
    unchanged = digests == [param_digest(p.model.encoder_params) for p in [*ent, *dis]]
    report = PipelineReport(
        final_loss_ent=final_ent, final_loss_dis=final_dis,
        initial_loss_ent=init_ent, initial_loss_dis=init_dis,
        max_linf=float(np.max(np.abs(delta))), epsilon_max=config.epsilon_max,
        encoder_digests_unchanged=unchanged,
        disentangled_seeds=[r.seed for r in dis_runs], entangled_seeds=[r.seed for r in ent_runs],
        disentangled_migs=[r.mig for r in dis_runs], entangled_migs=[r.mig for r in ent_runs],
        manip_losses=history)
    meta = {**ds.meta, "modification": {k: (list(v) if isinstance(v, tuple) else v)
                                        for k, v in asdict(config).items()}}
    out = ds.replace(images=modified, provenance="modified", meta=meta)
    return out, report
