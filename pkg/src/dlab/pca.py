"""SVD/PCA utilities and executable checks of the linear-VAE/PCA alignment result.

The supporting linear-algebra facts (AM-GM trace bound, zero-diagonal
absorption, optimal latent scaling) are exposed as small check functions so
they can be property-tested independently of any trained model.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .datagen import LabeledDataset
from .vae import VaeModel, detect_polarized_regime, encode_dataset


@dataclass
class SvdTriple:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _fix_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip column pairs so the largest-magnitude entry of each U column is positive."""
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, V * signs


def svd(M: np.ndarray) -> SvdTriple:
    """Thin SVD ``M = U diag(S) V^T`` with non-increasing ``S``."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or not np.all(np.isfinite(M)):
        raise ValueError("svd expects a finite 2-D matrix")
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    U, V = _fix_signs(U, Vt.T)
    return SvdTriple(U, S, V)


@dataclass
class PcaFit:
    mean: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    n: int

    @property
    def explained_variance(self) -> np.ndarray:
        return self.eigvals / max(self.n - 1, 1)

    def transform(self, X: np.ndarray, k: int | None = None) -> np.ndarray:
        V = self.eigvecs if k is None else self.eigvecs[:, :k]
        return (np.asarray(X) - self.mean) @ V


def pca_fit(X: np.ndarray) -> PcaFit:
    """Eigen-decomposition of ``Xc^T Xc`` through the SVD of the centered data."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError("pca_fit needs at least two rows")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, S, Vt = np.linalg.svd(Xc, full_matrices=n < d)
    eigvals = np.zeros(d)
    eigvals[:S.size] = S ** 2
    V = Vt.T
    V, _ = _fix_signs(V, np.zeros((1, d)))
    return PcaFit(mean, V, eigvals, n)


def signed_permutation_distance(V: np.ndarray) -> float:
    """``1 - mean_i max_j |V_ij|``; zero exactly for signed permutations."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise ValueError(f"signed_permutation_distance needs a square matrix, got shape {V.shape}")
    return float(1.0 - np.abs(V).max(axis=1).sum() / V.shape[0])


def is_signed_permutation(V: np.ndarray, atol: float = 0.0) -> bool:
    V = np.asarray(V)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        return False
    A = np.abs(V)
    ones = np.abs(A - 1.0) <= atol
    zeros = A <= atol
    return bool(np.all(ones | zeros) and np.all(ones.sum(0) == 1) and np.all(ones.sum(1) == 1))


def sort_latents_by_sigma(sigma2) -> np.ndarray:
    """Latent indices by ascending mean posterior variance; ties keep the lower index first."""
    s2 = np.asarray(sigma2, dtype=np.float64)
    if s2.ndim == 2:
        s2 = s2.mean(axis=0)
    return np.argsort(s2, kind="stable")


# ---------------------------------------------------------------------------
# Theorem check


@dataclass
class Theorem1Tolerances:
    max_distance: float = 0.05
    min_cosine: float = 0.99
    min_spearman: float = 1.0 - 1e-12
    active_threshold: float = 0.8
    ratio_threshold: float = 0.2


@dataclass
class Theorem1Report:
    distance: float
    cosines: list[float]
    cosines_data: list[float]
    spearman: float
    singular_values: list[float]
    mean_sigma2: list[float]
    active: list[int]
    polarized: list[bool]
    inconclusive: bool
    passed: bool
    tolerances: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _greedy_cosines(U: np.ndarray, W: np.ndarray) -> list[float]:
    """Match U columns (in order) to the best unused column of W by |cosine|."""
    C = np.abs(U.T @ W)
    used: set[int] = set()
    out = []
    for i in range(C.shape[0]):
        order = [j for j in np.argsort(-C[i]) if j not in used]
        j = order[0]
        used.add(j)
        out.append(float(C[i, j]))
    return out


def verify_theorem1(model: VaeModel, dataset: LabeledDataset,
                    tol: Theorem1Tolerances | None = None) -> Theorem1Report:
    """Check a trained linear beta-VAE's decoder against PCA of its reconstructions.

    Pruned latents (mean sigma^2 above the active threshold) are dropped before
    the SVD. The model is inconclusive, not failed, when an active latent is not
    in the polarized regime.
    """
    tol = tol or Theorem1Tolerances()
    X = dataset.images
    mu, s2 = encode_dataset(model, X)
    mean_s2 = s2.mean(axis=0)
    polarized = detect_polarized_regime(s2, tol.ratio_threshold)
    active = np.nonzero(mean_s2 < tol.active_threshold)[0]
    M = model.decoder_matrix()[:, active]
    inconclusive = active.size == 0 or not bool(np.all(polarized[active]))

    tri = svd(M)
    k = active.size
    distance = signed_permutation_distance(tri.V) if k else 1.0
    Xhat = model.decode_numpy(mu)
    cosines = _greedy_cosines(tri.U, pca_fit(Xhat).eigvecs[:, :k]) if k else []
    cosines_data = _greedy_cosines(tri.U, pca_fit(X).eigvecs[:, :k]) if k else []

    # Singular value attached to each active latent through the dominant entry of V.
    sv_of_latent = tri.S[np.argmax(np.abs(tri.V), axis=1)] if k else np.array([])
    if k >= 2:
        rho = float(spearmanr(sv_of_latent, -mean_s2[active]).statistic)
    else:
        rho = 1.0
    passed = (not inconclusive and distance < tol.max_distance
              and min(cosines, default=0.0) > tol.min_cosine and rho >= tol.min_spearman)
    return Theorem1Report(
        distance=distance, cosines=cosines, cosines_data=cosines_data, spearman=rho,
        singular_values=tri.S.tolist(), mean_sigma2=mean_s2.tolist(),
        active=active.tolist(), polarized=polarized.tolist(), inconclusive=inconclusive,
        passed=bool(passed), tolerances=asdict(tol))


# ---------------------------------------------------------------------------
# auxiliary statements


@dataclass
class TraceCheck:
    lhs: float
    rhs: float
    holds: bool
    equality_gap: float


def trace_inequality_check(M: np.ndarray) -> TraceCheck:
    """``tr(M) >= n det(M)^(1/n)`` for symmetric PSD ``M``."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    S = 0.5 * (M + M.T)
    lam = np.linalg.eigvalsh(S)
    if lam.min() < -1e-10:
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {lam.min():.3e})")
    n = S.shape[0]
    lam = np.clip(lam, 0.0, None)
    lhs = float(np.trace(S))
    rhs = float(n * math.exp(np.mean(np.log(lam)))) if np.all(lam > 0) else 0.0
    return TraceCheck(lhs, rhs, lhs >= rhs - 1e-9, lhs - rhs)


def diag_absorb_check(D: np.ndarray, M: np.ndarray, atol: float = 1e-12) -> bool:
    """For diagonal ``D`` and zero-diagonal ``M``: ``diag(MD) = diag(DM) = 0``."""
    D, M = np.asarray(D, dtype=np.float64), np.asarray(M, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1] or D.shape != M.shape:
        raise ValueError(f"D and M must be equal square matrices, got {D.shape} and {M.shape}")
    if np.any(D - np.diag(np.diag(D))):
        raise ValueError("D must be diagonal")
    if np.any(np.diag(M)):
        raise ValueError("M must have an all-zero diagonal")
    MD, DM = M @ D, D @ M
    return bool(np.all(np.abs(np.diag(MD)) <= atol) and np.all(np.abs(np.diag(DM)) <= atol)
                and abs(np.trace(MD)) <= atol and abs(np.trace(DM)) <= atol)


@dataclass
class LatentScale:
    c_numeric: float
    c_closed_form: float
    unbounded: bool

    @property
    def discrepancy(self) -> float:
        return self.c_numeric - self.c_closed_form


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_section(f, a: float, b: float, tol: float) -> float:
    c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def optimal_latent_scale(x, y, tol: float = 1e-10) -> LatentScale:
    """Minimize ``sum_i (c^2 x_i^2 - log(c^2 y_i^2))`` over ``c > 0`` numerically.

    Also returns ``sqrt(sum x_i^2)`` for comparison; the two differ in general.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if np.any(y == 0):
        raise ValueError("y entries must be nonzero")
    sx = float(np.sum(x * x))
    c_closed_form = math.sqrt(sx)
    if sx == 0.0:
        return LatentScale(math.inf, c_closed_form, True)
    n = x.size

    # The y term only shifts the objective; it is left out of the search.
    def f(c: float) -> float:
        return c * c * sx - n * math.log(c * c)

    # Bracket the minimum by doubling / halving from c = 1.
    lo, hi = 0.5, 2.0
    while f(hi) < f(hi / 2.0):
        hi *= 2.0
    while f(lo) < f(2.0 * lo):
        lo /= 2.0
    c = _golden_section(f, lo, hi, tol * max(1.0, hi))
    # Golden section stalls near sqrt(machine eps) on a flat minimum; polish
    # with Newton steps on the derivative 2c*sx - 2n/c.
    for _ in range(4):
        g = 2.0 * c * sx - 2.0 * n / c
        h = 2.0 * sx + 2.0 * n / (c * c)
        c = max(c - g / h, 0.5 * c)
    return LatentScale(c, c_closed_form, False)
