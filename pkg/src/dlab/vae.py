"""Autoencoders and beta-VAEs (linear and MLP) on top of ``dlab.tensor``."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Value

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DLCK1\n"


@dataclass
class ModelConfig:
    arch: str = "mlp"
    input_dim: int = 1024
    latent_dim: int = 4
    hidden: tuple[int, ...] = (256, 128)
    beta: float = 1.0
    variational: bool = True

    def __post_init__(self):
        if self.arch not in ("linear", "mlp"):
            raise ValueError(f"arch must be 'linear' or 'mlp', got {self.arch!r}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ValueError("input_dim and latent_dim must be positive")
        self.hidden = tuple(int(h) for h in self.hidden) if self.arch == "mlp" else ()


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str, zero: bool = False):
        bound = 1.0 / np.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        self.W = Value(w, requires_grad=True, name=f"{name}.W")
        self.b = Value(np.zeros(n_out), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Value) -> Value:
        return T.matmul(x, self.W) + self.b

    @property
    def params(self) -> list[Value]:
        return [self.W, self.b]


def _mlp(sizes: Sequence[int], rng, prefix: str) -> list[Dense]:
    return [Dense(a, b, rng, f"{prefix}{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]


class VaeModel:
    """Encoder ``x -> (mu, log sigma^2)`` and decoder ``z -> x``.

    With ``arch='linear'`` both maps are affine, so the decoder weight is the
    matrix whose SVD the PCA checks inspect (``decoder_matrix``).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, k = config.input_dim, config.latent_dim
        enc_sizes = [d, *config.hidden]
        self.enc_hidden = _mlp(enc_sizes, rng, "enc")
        self.mu_head = Dense(enc_sizes[-1], k, rng, "enc.mu")
        self.logvar_head = Dense(enc_sizes[-1], k, rng, "enc.logvar", zero=True)
        self.dec_layers = _mlp([k, *reversed(config.hidden), d], rng, "dec")

    # parameter groups -----------------------------------------------------
    @property
    def encoder_params(self) -> list[Value]:
        ps = [p for layer in self.enc_hidden for p in layer.params]
        return ps + self.mu_head.params + self.logvar_head.params

    @property
    def decoder_params(self) -> list[Value]:
        return [p for layer in self.dec_layers for p in layer.params]

    @property
    def params(self) -> list[Value]:
        return self.encoder_params + self.decoder_params

    @property
    def trainable_params(self) -> list[Value]:
        """Parameters the loss depends on; a plain autoencoder ignores its log-variance head."""
        if self.config.variational:
            return self.params
        head = {id(p) for p in self.logvar_head.params}
        return [p for p in self.params if id(p) not in head]

    def named_params(self) -> dict[str, Value]:
        return {p.name: p for p in self.params}

    # forward ----------------------------------------------------------------
    def encode(self, x: Value) -> tuple[Value, Value]:
        h = x
        for layer in self.enc_hidden:
            h = T.relu(layer(h))
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z: Value) -> Value:
        h = z
        for i, layer in enumerate(self.dec_layers):
            h = layer(h)
            if i < len(self.dec_layers) - 1:
                h = T.relu(h)
        return h

    def decoder_matrix(self) -> np.ndarray:
        """``[d x k]`` matrix of the linear decoder (column j decodes latent j)."""
        if self.config.arch != "linear":
            raise ValueError("decoder_matrix is only defined for linear models")
        return self.dec_layers[0].W.data.T.copy()

    def encoder_matrix(self) -> np.ndarray:
        if self.config.arch != "linear":
            raise ValueError("encoder_matrix is only defined for linear models")
        return self.mu_head.W.data.T.copy()

    def copy(self) -> "VaeModel":
        other = VaeModel.__new__(VaeModel)
        other.config = ModelConfig(**asdict(self.config))
        other.enc_hidden = [_copy_dense(l) for l in self.enc_hidden]
        other.mu_head = _copy_dense(self.mu_head)
        other.logvar_head = _copy_dense(self.logvar_head)
        other.dec_layers = [_copy_dense(l) for l in self.dec_layers]
        return other

    def encode_numpy(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu, logvar = self.encode(Value(x))
        return mu.data, logvar.data

    def decode_numpy(self, z: np.ndarray) -> np.ndarray:
        return self.decode(Value(z)).data


def _copy_dense(layer: Dense) -> Dense:
    new = Dense.__new__(Dense)
    new.W = Value(layer.W.data.copy(), requires_grad=True, name=layer.W.name)
    new.b = Value(layer.b.data.copy(), requires_grad=True, name=layer.b.name)
    return new


def param_digest(params: Sequence[Value]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# forward pass and loss


def vae_forward(model: VaeModel, batch, noise) -> tuple[Value, Value, Value, Value]:
    """Returns ``(mu, sigma, z, reconstruction)`` graph nodes."""
    x = T.as_value(batch)
    if x.data.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise T.DimensionError(f"batch shape {x.shape} does not match input_dim {model.config.input_dim}")
    mu, logvar = model.encode(x)
    noise = T.as_value(noise)
    if noise.shape != mu.shape:
        raise T.DimensionError(f"noise shape {noise.shape} does not match latent shape {mu.shape}")
    sigma = T.exp(0.5 * logvar)
    z = T.gaussian_sample(mu, logvar, noise) if model.config.variational else mu
    return mu, sigma, z, model.decode(z)


@dataclass
class LossBreakdown:
    total: float
    rec: float
    kl: float
    rec_mu: float
    rec_stoch: float
    kl_polarized: float
    graph: Value | None = field(default=None, repr=False, compare=False)


def kl_terms(mu: Value, logvar: Value) -> Value:
    """Per-sample KL(q || N(0, I)), shape ``[b]``."""
    inner = T.square(mu) + T.exp(logvar) - logvar - 1.0
    return 0.5 * T.sum(inner, axis=1)


def loss_graph(model: VaeModel, x: Value, noise, beta: float) -> tuple[Value, Value, Value, Value, Value, Value]:
    mu, logvar = model.encode(x)
    z = T.gaussian_sample(mu, logvar, noise) if model.config.variational else mu
    recon = model.decode(z)
    rec = T.mean(T.sum(T.square(recon - x), axis=1))
    kl = T.mean(kl_terms(mu, logvar))
    total = rec + beta * kl if model.config.variational else rec
    return total, rec, kl, mu, logvar, recon


def beta_vae_loss(model: VaeModel, batch, noise, beta: float | None = None) -> LossBreakdown:
    beta = model.config.beta if beta is None else beta
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    x = T.as_value(batch)
    noise = np.asarray(noise.data if isinstance(noise, Value) else noise, dtype=np.float64)
    if noise.shape != (x.shape[0], model.config.latent_dim):
        raise T.DimensionError(f"noise shape {noise.shape} does not match ({x.shape[0]}, {model.config.latent_dim})")
    total, rec, kl, mu, logvar, recon = loss_graph(model, x, noise, beta)
    dec_mu = model.decode_numpy(mu.data)
    rec_mu = float(np.mean(np.sum((dec_mu - x.data) ** 2, axis=1)))
    rec_stoch = float(np.mean(np.sum((recon.data - dec_mu) ** 2, axis=1)))
    kl_pol = float(np.mean(np.sum(mu.data ** 2 - logvar.data, axis=1)))
    return LossBreakdown(total.item(), rec.item(), kl.item(), rec_mu, rec_stoch, kl_pol, graph=total)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHyper:
    beta: float | None = None
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 30000
    seed: int = 0
    smooth_window: int = 200


@dataclass
class TrainedRun:
    model: VaeModel
    losses: list[float]
    mu: np.ndarray
    sigma2: np.ndarray
    seed: int
    failed: bool = False
    failed_step: int | None = None
    monotone_flag: bool = False

    @property
    def mean_sigma2(self) -> np.ndarray:
        return self.sigma2.mean(axis=0)


def encode_dataset(model: VaeModel, images: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and variances; a deterministic encoder reports zero variance."""
    mus, s2 = [], []
    for start in range(0, len(images), chunk):
        mu, logvar = model.encode_numpy(images[start:start + chunk])
        mus.append(mu)
        s2.append(np.exp(logvar) if model.config.variational else np.zeros_like(mu))
    return np.concatenate(mus), np.concatenate(s2)


def _smoothed_increase(losses: Sequence[float], window: int) -> bool:
    if len(losses) < 2 * window:
        return False
    arr = np.asarray(losses)
    n = len(arr) // window
    means = arr[: n * window].reshape(n, window).mean(axis=1)
    return bool(np.any(np.diff(means) > 0.05 * np.abs(means[:-1]) + 1e-12))


def train_model(model: VaeModel, images: np.ndarray, hyper: TrainHyper) -> TrainedRun:
    """Minibatch Adam on the beta-VAE loss; deterministic given ``hyper.seed``."""
    if images.shape[1] != model.config.input_dim:
        raise T.DimensionError(
            f"dataset dimension {images.shape[1]} does not match model input_dim {model.config.input_dim}")
    beta = model.config.beta if hyper.beta is None else hyper.beta
    rng = np.random.default_rng(hyper.seed)
    opt = T.Adam(model.trainable_params, lr=hyper.lr)
    n = len(images)
    bs = min(hyper.batch_size, n)
    k = model.config.latent_dim
    losses: list[float] = []
    order = rng.permutation(n)
    cursor = 0
    for step in range(hyper.steps):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        noise = rng.standard_normal((bs, k))
        total, *_ = loss_graph(model, Value(images[idx]), noise, beta)
        value = total.item()
        if not np.isfinite(value):
            log.warning("training diverged at step %d", step)
            mu, s2 = np.full((n, k), np.nan), np.full((n, k), np.nan)
            return TrainedRun(model, losses, mu, s2, hyper.seed, failed=True, failed_step=step)
        losses.append(value)
        T.backward(total)
        opt.step()
    mu, s2 = encode_dataset(model, images)
    return TrainedRun(model, losses, mu, s2, hyper.seed,
                      monotone_flag=_smoothed_increase(losses, hyper.smooth_window))


def detect_polarized_regime(sigma2: np.ndarray, ratio_threshold: float = 0.2) -> np.ndarray:
    """Per latent: ``E[sigma^2] <= ratio * E[-log sigma^2]``.

    Accepts either a per-sample ``[n x k]`` table or per-latent means.
    """
    s2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    if np.any(s2 <= 0):
        raise ValueError("sigma^2 must be positive")
    return s2.mean(axis=0) <= ratio_threshold * (-np.log(s2)).mean(axis=0)


# ---------------------------------------------------------------------------
# checkpoints: MAGIC | u64 manifest length | manifest JSON | float64 LE blob


def save_checkpoint(model: VaeModel, path: str | Path, step: int = 0, seed: int = 0) -> Path:
    path = Path(path)
    tensors, blob, offset = [], bytearray(), 0
    for p in model.params:
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        tensors.append({"name": p.name, "shape": list(p.shape), "offset": offset, "length": len(raw)})
        blob += raw
        offset += len(raw)
    cfg = asdict(model.config)
    cfg["hidden"] = list(cfg["hidden"])
    manifest = {"magic": "DLCK1", "config": cfg, "step": step, "seed": seed, "tensors": tensors,
                "sha256": hashlib.sha256(bytes(blob)).hexdigest()}
    head = json.dumps(manifest, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(head)) + head + bytes(blob))
    return path


def load_checkpoint(path: str | Path) -> tuple[VaeModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a DLCK1 checkpoint")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    manifest = json.loads(raw[pos + 8:pos + 8 + hlen])
    blob = raw[pos + 8 + hlen:]
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{path}: checkpoint checksum mismatch")
    cfg = manifest["config"]
    model = VaeModel(ModelConfig(**{**cfg, "hidden": tuple(cfg["hidden"])}))
    named = model.named_params()
    for t in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"])
        named[t["name"]].data = arr.astype(np.float64)
    return model, manifest
