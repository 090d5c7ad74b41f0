"""Disentanglement metrics over (factor, latent) tables.

All scores take a :class:`RepresentationTable` whose factors are integer
indices into a complete (or partial) factor grid.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .datagen import FactorGrid


@dataclass
class RepresentationTable:
    mu: np.ndarray
    sigma2: np.ndarray
    factor_indices: np.ndarray
    grid: FactorGrid

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        self.factor_indices = np.asarray(self.factor_indices, dtype=np.int64)
        n = self.mu.shape[0]
        if self.sigma2.shape != self.mu.shape or self.factor_indices.shape[0] != n:
            raise ValueError(
                f"row counts differ: mu {self.mu.shape}, sigma2 {self.sigma2.shape}, "
                f"factors {self.factor_indices.shape}")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma2))):
            raise ValueError("representation table has non-finite entries")

    @property
    def num_latents(self) -> int:
        return self.mu.shape[1]

    @property
    def num_factors(self) -> int:
        return self.factor_indices.shape[1]


def discretize_latents(mu: np.ndarray, bins: int = 20) -> np.ndarray:
    """Equal-width histogram codes per column; the top edge is closed."""
    if bins < 2:
        raise ValueError(f"bins must be at least 2, got {bins}")
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    codes = np.zeros(mu.shape, dtype=np.int64)
    for j in range(mu.shape[1]):
        col = mu[:, j]
        lo, hi = col.min(), col.max()
        if hi <= lo:
            continue
        c = np.floor((col - lo) / (hi - lo) * bins).astype(np.int64)
        codes[:, j] = np.minimum(c, bins - 1)
    return codes


def _relabel(a: np.ndarray) -> tuple[np.ndarray, int]:
    uniq, inv = np.unique(np.asarray(a), return_inverse=True)
    return inv.reshape(-1), uniq.size


def entropy(a: np.ndarray) -> float:
    _, counts = np.unique(np.asarray(a), return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in MI (nats) of two discrete columns from their joint histogram."""
    a, b = np.asarray(a).reshape(-1), np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"columns differ in length: {a.shape} vs {b.shape}")
    ia, na = _relabel(a)
    ib, nb = _relabel(b)
    joint = np.zeros((na, nb))
    np.add.at(joint, (ia, ib), 1.0)
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = np.sum(pxy[nz] * (np.log(pxy[nz]) - np.log((px @ py)[nz])))
    return float(max(mi, 0.0))


def mutual_info_matrix(codes: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """``[num_factors x num_latents]`` MI table."""
    return np.array([[mutual_information(factors[:, i], codes[:, j]) for j in range(codes.shape[1])]
                     for i in range(factors.shape[1])])


def mig_score(table: RepresentationTable, bins: int = 20, return_matrix: bool = False):
    """Mean over factors of the entropy-normalized gap between the two largest MIs."""
    if table.num_latents < 2:
        raise ValueError("MIG needs at least two latents")
    codes = discretize_latents(table.mu, bins)
    mi = mutual_info_matrix(codes, table.factor_indices)
    h = np.array([entropy(table.factor_indices[:, i]) for i in range(table.num_factors)])
    keep = h > 0
    if not np.any(keep):
        raise ValueError("every factor is constant; MIG is undefined")
    top2 = -np.sort(-mi[keep], axis=1)[:, :2]
    score = float(np.mean((top2[:, 0] - top2[:, 1]) / h[keep]))
    return (score, mi) if return_matrix else score


def _r2(x: np.ndarray, y: np.ndarray) -> float:
    """Coefficient of determination of the least-squares line y ~ x."""
    vx, vy = np.var(x), np.var(y)
    if vx <= 1e-12 or vy <= 1e-12:
        return 0.0
    c = np.mean((x - x.mean()) * (y - y.mean()))
    return float(c * c / (vx * vy))


def sap_score(table: RepresentationTable) -> float:
    """Mean over factors of the gap between the two best single-latent R^2 fits."""
    if table.num_latents < 2:
        raise ValueError("SAP needs at least two latents")
    values = table.grid.values_at(table.factor_indices) if table.grid.num_factors else table.factor_indices
    scores = np.array([[_r2(table.mu[:, j], values[:, i]) for j in range(table.num_latents)]
                       for i in range(table.num_factors)])
    top2 = -np.sort(-scores, axis=1)[:, :2]
    return float(np.mean(top2[:, 0] - top2[:, 1]))


def spearman_importance(table: RepresentationTable) -> np.ndarray:
    """``[num_latents x num_factors]`` absolute Spearman correlations."""
    k, f = table.num_latents, table.num_factors
    R = np.zeros((k, f))
    za = [rankdata(table.mu[:, j]) for j in range(k)]
    wa = [rankdata(table.factor_indices[:, i]) for i in range(f)]
    for j in range(k):
        for i in range(f):
            a, b = za[j], wa[i]
            sa, sb = a.std(), b.std()
            if sa > 0 and sb > 0:
                R[j, i] = abs(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return R


def dci_from_importance(R: np.ndarray) -> float:
    R = np.abs(np.asarray(R, dtype=np.float64))
    total = R.sum()
    if total <= 0:
        return 0.0
    nf = R.shape[1]
    row = R.sum(axis=1)
    dis = np.zeros(R.shape[0])
    for j in range(R.shape[0]):
        if row[j] <= 0:
            continue
        p = R[j] / row[j]
        nz = p > 0
        h = -np.sum(p[nz] * np.log(p[nz])) / np.log(nf) if nf > 1 else 0.0
        dis[j] = 1.0 - h
    return float(np.sum(dis * row / total))


def dci_disentanglement(table: RepresentationTable) -> float:
    return dci_from_importance(spearman_importance(table))


def factorvae_score(table: RepresentationTable, votes: int = 800, batch: int = 64, seed: int = 0,
                    prune_threshold: float = 0.8) -> float:
    """Majority-vote classifier accuracy on held-out votes.

    Each vote fixes one factor at a random level, draws ``batch`` points that
    share it, and records the latent of least normalized variance. Half of the
    votes fit the factor-per-latent majority classifier; the other half score it.
    """
    rng = np.random.default_rng(seed)
    mu = table.mu
    scale = mu.std(axis=0)
    active = (table.sigma2.mean(axis=0) < prune_threshold) & (scale > 0)
    factors = [i for i in range(table.num_factors) if np.unique(table.factor_indices[:, i]).size > 1]
    if not factors or not np.any(active):
        return 0.0
    z = np.where(scale > 0, mu / np.where(scale > 0, scale, 1.0), 0.0)
    k = table.num_latents
    pools = {i: {lvl: np.nonzero(table.factor_indices[:, i] == lvl)[0]
                 for lvl in np.unique(table.factor_indices[:, i])} for i in factors}
    feats = np.empty(votes, dtype=np.int64)
    labels = np.empty(votes, dtype=np.int64)
    for v in range(votes):
        f = factors[rng.integers(len(factors))]
        lvls = list(pools[f])
        rows = pools[f][lvls[rng.integers(len(lvls))]]
        pick = rng.choice(rows, size=batch, replace=len(rows) < batch)
        var = z[pick].var(axis=0)
        var[~active] = np.inf
        feats[v] = int(np.argmin(var))
        labels[v] = f
    half = votes // 2
    counts = np.zeros((k, table.num_factors), dtype=np.int64)
    np.add.at(counts, (feats[:half], labels[:half]), 1)
    classifier = counts.argmax(axis=1)
    return float(np.mean(classifier[feats[half:]] == labels[half:]))


def count_active_units(sigma2: np.ndarray, threshold: float = 0.8) -> int:
    s2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    return int(np.sum(s2.mean(axis=0) < threshold))


@dataclass
class MetricReport:
    mig: float
    sap: float
    dci_d: float
    factorvae_score: float
    active_units: int
    mi_matrix: list[list[float]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate_all(table: RepresentationTable, bins: int = 20, seed: int = 0,
                 active_threshold: float = 0.8) -> MetricReport:
    mig, mi = mig_score(table, bins=bins, return_matrix=True)
    return MetricReport(
        mig=mig,
        sap=sap_score(table),
        dci_d=dci_disentanglement(table),
        factorvae_score=factorvae_score(table, seed=seed, prune_threshold=active_threshold),
        active_units=count_active_units(table.sigma2, active_threshold),
        mi_matrix=mi.tolist(),
    )
