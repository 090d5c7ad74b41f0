"""Procedural datasets with known, independent generative factors.

Three generators are provided:

* ``minisprites`` - anti-aliased grayscale sprites (square / disc / triangle)
  rendered over a complete factor grid, a miniature of dSprites.
* ``grid_cloud`` - a 2-D point cloud of small axis-aligned clusters sitting
  on a coarse lattice.
* ``linear_gaussian`` - i.i.d. rows ``x = A s`` with ``s ~ N(0, diag(lam))``.

Datasets serialize to the DLAB1 single-file format (see ``save_dataset``).
"""
from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

MAGIC = b"DLAB1\n"
SHAPES = ("square", "disc", "triangle")
SUPERSAMPLE = 4


class DatasetFormatError(ValueError):
    """Raised when a DLAB1 file cannot be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Factor:
    name: str
    levels: int
    values: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, Factor) and self.name == other.name
                and self.levels == other.levels and np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class FactorGrid:
    """Cartesian product of discrete factors, enumerated in C order."""

    factors: tuple[Factor, ...]

    def __post_init__(self):
        for f in self.factors:
            if f.levels < 2:
                raise ValueError(f"factor {f.name!r} needs at least 2 levels, got {f.levels}")
            if len(f.values) != f.levels or np.any(np.diff(f.values) <= 0):
                raise ValueError(f"factor {f.name!r} values must be {f.levels} strictly increasing scalars")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.factors]

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(f.levels for f in self.factors)

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    @property
    def size(self) -> int:
        return int(np.prod(self.levels, dtype=np.int64)) if self.factors else 0

    def all_indices(self) -> np.ndarray:
        """Every grid point as an ``[size x num_factors]`` integer array."""
        if not self.factors:
            return np.zeros((0, 0), dtype=np.int64)
        return np.array(list(itertools.product(*(range(n) for n in self.levels))), dtype=np.int64)

    def values_at(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        return np.stack([f.values[indices[:, j]] for j, f in enumerate(self.factors)], axis=1)

    def unit_coordinates(self, indices: np.ndarray) -> np.ndarray:
        """Factor indices rescaled to [0, 1] per factor."""
        indices = np.asarray(indices, dtype=np.float64)
        return indices / (np.asarray(self.levels, dtype=np.float64) - 1.0)

    def contains(self, indices: np.ndarray) -> bool:
        indices = np.asarray(indices)
        return bool(np.all(indices >= 0) and np.all(indices < np.asarray(self.levels)))

    def __eq__(self, other):
        return isinstance(other, FactorGrid) and self.factors == other.factors


def make_factor_grid(spec: Sequence[tuple[str, int, float, float]]) -> FactorGrid:
    factors = []
    for name, levels, lo, hi in spec:
        if levels < 2:
            raise ValueError(f"factor {name!r} needs at least 2 levels, got {levels}")
        if not lo < hi:
            raise ValueError(f"factor {name!r} needs lo < hi, got {lo} >= {hi}")
        factors.append(Factor(str(name), int(levels), np.linspace(lo, hi, levels)))
    return FactorGrid(tuple(factors))


@dataclass
class LabeledDataset:
    """Images (or points) paired with the factor indices that produced them."""

    images: np.ndarray
    factor_indices: np.ndarray
    grid: FactorGrid
    image_side: int = 0
    provenance: str = "original"
    kind: str = "minisprites"
    seed: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        # Stored at float32 precision so the DLAB1 round trip is exact.
        self.images = np.asarray(self.images, dtype=np.float32).astype(np.float64)
        self.factor_indices = np.asarray(self.factor_indices, dtype=np.int64)
        if self.images.ndim != 2:
            raise ValueError(f"images must be [n x d], got shape {self.images.shape}")
        if self.factor_indices.shape != (self.n, self.grid.num_factors):
            raise ValueError(
                f"factor_indices shape {self.factor_indices.shape} does not match "
                f"(n={self.n}, factors={self.grid.num_factors})")
        if self.provenance not in ("original", "modified", "noise"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.grid.num_factors and not self.grid.contains(self.factor_indices):
            raise ValueError("factor_indices fall outside the factor grid")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def d(self) -> int:
        return self.images.shape[1]

    def is_complete_grid(self) -> bool:
        """True iff each grid point appears exactly once."""
        if not self.grid.num_factors or self.n != self.grid.size:
            return False
        flat = np.ravel_multi_index(self.factor_indices.T, self.grid.levels)
        return np.unique(flat).size == self.grid.size

    def replace(self, **changes) -> "LabeledDataset":
        fields = dict(images=self.images, factor_indices=self.factor_indices, grid=self.grid,
                      image_side=self.image_side, provenance=self.provenance, kind=self.kind,
                      seed=self.seed, meta=dict(self.meta))
        fields.update(changes)
        return LabeledDataset(**fields)

    def __eq__(self, other):
        return (isinstance(other, LabeledDataset)
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.factor_indices, other.factor_indices)
                and self.grid == other.grid and self.image_side == other.image_side
                and self.provenance == other.provenance and self.kind == other.kind
                and self.seed == other.seed and self.meta == other.meta)


# ---------------------------------------------------------------------------
# minisprites


def default_minisprite_grid() -> FactorGrid:
    return make_factor_grid([
        ("shape", 3, 0.0, 2.0),
        ("scale", 5, 0.20, 0.32),
        ("pos_x", 8, 0.34, 0.66),
        ("pos_y", 8, 0.34, 0.66),
    ])


def _extent(shape: int, scale: float, orientation: float) -> float:
    # Half-width of the axis-aligned box that bounds the shape.
    if SHAPES[shape] == "triangle" and orientation:
        return scale * np.sqrt(2.0)
    return scale


def check_minisprite_grid(grid: FactorGrid, orientation: float = 0.0) -> None:
    """Reject grids whose sprites would touch or cross the canvas edge."""
    if grid.names[:4] != ["shape", "scale", "pos_x", "pos_y"]:
        raise ValueError(f"minisprite grid needs factors shape, scale, pos_x, pos_y; got {grid.names}")
    shapes = grid.factors[0].values
    if not np.all(np.isin(shapes, np.arange(len(SHAPES)))):
        raise ValueError(f"shape factor values must be indices into {SHAPES}")
    if orientation and not np.array_equal(shapes, [2.0]):
        raise ValueError("orientation is only supported for triangle-only grids")
    max_ext = max(_extent(int(s), grid.factors[1].values[-1], orientation) for s in shapes)
    for f in grid.factors[2:4]:
        if f.values[0] - max_ext <= 0.0 or f.values[-1] + max_ext >= 1.0:
            raise ValueError(
                f"sprite of half-extent {max_ext:.3f} exits the canvas along {f.name} "
                f"(range {f.values[0]:.3f}..{f.values[-1]:.3f})")


def _coverage(shape: int, scale, px, py, u, v, orientation: float = 0.0) -> np.ndarray:
    """Boolean coverage of sample points ``(u, v)`` (broadcast against the params)."""
    du, dv = u - px, v - py
    kind = SHAPES[shape]
    if kind == "square":
        return (np.abs(du) <= scale) & (np.abs(dv) <= scale)
    if kind == "disc":
        return du * du + dv * dv <= scale * scale
    if orientation:
        c, s = np.cos(orientation), np.sin(orientation)
        du, dv = c * du + s * dv, -s * du + c * dv
    # Apex up; base spans the full box width on the bottom edge.
    t = (dv + scale) / (2.0 * scale)
    return (dv >= -scale) & (dv <= scale) & (np.abs(du) <= scale * t)


def _sample_grid(r: int, supersample: int) -> tuple[np.ndarray, np.ndarray]:
    centers = (np.arange(r * supersample) + 0.5) / (r * supersample)
    v, u = np.meshgrid(centers, centers, indexing="ij")
    return u, v


def render_minisprite(w: Sequence[float], r: int = 32, orientation: float = 0.0,
                      supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Render one sprite from ``(shape, scale, pos_x, pos_y)`` as an ``[r x r]`` image."""
    if r < 16:
        raise ValueError(f"image side must be at least 16, got {r}")
    shape, scale, px, py = (float(x) for x in w[:4])
    u, v = _sample_grid(r, supersample)
    cover = _coverage(int(round(shape)), scale, px, py, u, v, orientation)
    return cover.reshape(r, supersample, r, supersample).mean(axis=(1, 3))


def render_minisprites(grid: FactorGrid, indices: np.ndarray, r: int = 32,
                       orientation: float = 0.0) -> np.ndarray:
    """Vectorized renderer; returns ``[n x r*r]``."""
    values = grid.values_at(indices)
    u, v = _sample_grid(r, SUPERSAMPLE)
    out = np.empty((len(values), r * r))
    chunk = 64
    for start in range(0, len(values), chunk):
        block = values[start:start + chunk]
        for shape in np.unique(np.round(block[:, 0]).astype(int)):
            rows = np.nonzero(np.round(block[:, 0]) == shape)[0]
            sc, px, py = (block[rows, j][:, None, None] for j in (1, 2, 3))
            cover = _coverage(int(shape), sc, px, py, u[None], v[None], orientation)
            img = cover.reshape(len(rows), r, SUPERSAMPLE, r, SUPERSAMPLE).mean(axis=(2, 4))
            out[start + rows] = img.reshape(len(rows), -1)
    return out


def make_minisprites(r: int = 32, grid: FactorGrid | None = None, orientation: float = 0.0,
                     seed: int = 0) -> LabeledDataset:
    grid = grid or default_minisprite_grid()
    check_minisprite_grid(grid, orientation)
    idx = grid.all_indices()
    images = render_minisprites(grid, idx, r, orientation)
    return LabeledDataset(images, idx, grid, image_side=r, kind="minisprites", seed=seed,
                          meta={"orientation": orientation})


# ---------------------------------------------------------------------------
# point clouds


def make_grid_cloud(k: int = 4, cluster_half_width: float = 0.02, points_per_axis: int = 5,
                    lo: float = 0.2, hi: float = 0.8, seed: int = 0) -> LabeledDataset:
    """k x k lattice of clusters; each cluster is a uniform m x m midpoint lattice.

    Local offsets use cell midpoints so the per-axis local variance is
    ``h**2 * (1 - 1/m**2) / 3``, never above the continuous-uniform ``h**2 / 3``.
    """
    m = points_per_axis
    h = cluster_half_width
    if m < 2:
        raise ValueError("points_per_axis must be at least 2")
    if h <= 0 or 2 * h >= (hi - lo) / max(k - 1, 1):
        raise ValueError(f"cluster_half_width {h} must be positive and keep clusters disjoint")
    off = h * (1.0 - 1.0 / m)
    grid = make_factor_grid([
        ("cluster_x", k, lo, hi), ("cluster_y", k, lo, hi),
        ("local_x", m, -off, off), ("local_y", m, -off, off),
    ])
    idx = grid.all_indices()
    vals = grid.values_at(idx)
    points = np.stack([vals[:, 0] + vals[:, 2], vals[:, 1] + vals[:, 3]], axis=1)
    return LabeledDataset(points, idx, grid, image_side=0, kind="grid_cloud", seed=seed,
                          meta={"k": k, "cluster_half_width": h, "points_per_axis": m})


_EMPTY_GRID = FactorGrid(())


def make_linear_gaussian(A: np.ndarray, lambdas: Sequence[float], n: int,
                         seed: int = 0) -> LabeledDataset:
    """Rows ``x = A s`` with ``s ~ N(0, diag(lambdas))``; no factor grid."""
    A = np.asarray(A, dtype=np.float64)
    lam = np.asarray(lambdas, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != lam.size:
        raise ValueError(f"A of shape {A.shape} does not match {lam.size} source variances")
    if np.any(lam <= 0):
        raise ValueError("source variances must be positive")
    if np.unique(lam).size != lam.size:
        raise ValueError(f"source variances must be distinct, got {lam.tolist()}")
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((n, lam.size)) * np.sqrt(lam)
    x = s @ A.T
    return LabeledDataset(x, np.zeros((n, 0), dtype=np.int64), _EMPTY_GRID, image_side=0,
                          kind="linear_gaussian", seed=seed,
                          meta={"A": A.tolist(), "lambdas": lam.tolist()})


def random_orthonormal(d: int, seed: int) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def generate_dataset(kind: str, params: dict[str, Any] | None = None, seed: int = 0) -> LabeledDataset:
    params = dict(params or {})
    if kind == "minisprites":
        grid = params.pop("grid", None)
        if isinstance(grid, list):
            grid = make_factor_grid(grid)
        return make_minisprites(grid=grid, seed=seed, **params)
    if kind == "grid_cloud":
        return make_grid_cloud(seed=seed, **params)
    if kind == "linear_gaussian":
        lam = params.pop("lambdas")
        A = params.pop("A", None)
        if A is None:
            d = params.pop("d", len(lam))
            A = random_orthonormal(d, seed + 7919)[:, :len(lam)]
        return make_linear_gaussian(A, lam, seed=seed, **params)
    raise ValueError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# DLAB1 serialization
#
# layout: MAGIC | u64 manifest length | manifest JSON (utf-8) | blob
# blob:   float32 LE images (row-major) followed by uint16 LE factor indices


def _grid_to_json(grid: FactorGrid) -> list[dict]:
    return [{"name": f.name, "levels": f.levels, "values": f.values.tolist()} for f in grid.factors]


def _grid_from_json(items: list[dict]) -> FactorGrid:
    return FactorGrid(tuple(Factor(it["name"], int(it["levels"]), np.asarray(it["values"], dtype=np.float64))
                            for it in items))


def save_dataset(ds: LabeledDataset, path: str | Path) -> Path:
    path = Path(path)
    if np.any(ds.factor_indices > np.iinfo(np.uint16).max):
        raise ValueError("factor indices exceed uint16 range")
    img = ds.images.astype("<f4").tobytes()
    fac = ds.factor_indices.astype("<u2").tobytes()
    blob = img + fac
    manifest = {
        "magic": "DLAB1",
        "kind": ds.kind,
        "image_side": ds.image_side,
        "n": ds.n,
        "d": ds.d,
        "factors": _grid_to_json(ds.grid),
        "provenance": ds.provenance,
        "seed": ds.seed,
        "meta": ds.meta,
        "images": {"offset": 0, "length": len(img), "dtype": "<f4"},
        "factor_indices": {"offset": len(img), "length": len(fac), "dtype": "<u2"},
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob)
    return path


_MANIFEST_KEYS = ("kind", "image_side", "n", "d", "factors", "provenance", "seed", "images",
                  "factor_indices", "sha256")


def load_dataset(path: str | Path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError("bad magic, not a DLAB1 file", 0)
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise DatasetFormatError("truncated manifest length", pos)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise DatasetFormatError(f"truncated manifest, expected {hlen} bytes", pos)
    try:
        manifest = json.loads(raw[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"corrupt manifest: {exc}", pos) from None
    if manifest.get("magic") != "DLAB1":
        raise DatasetFormatError("manifest magic mismatch", pos)
    pos += hlen
    blob = raw[pos:]
    missing = [k for k in _MANIFEST_KEYS if k not in manifest]
    if missing:
        raise DatasetFormatError(f"manifest lacks fields {missing}", pos - hlen)
    try:
        n, d = int(manifest["n"]), int(manifest["d"])
        nf = len(manifest["factors"])
        im, fi = manifest["images"], manifest["factor_indices"]
        int(im["offset"]) + int(im["length"]) + int(fi["offset"]) + int(fi["length"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"malformed manifest field: {exc}", pos - hlen) from None
    if im["length"] != n * d * 4 or fi["length"] != n * nf * 2:
        raise DatasetFormatError("manifest lengths disagree with n/d/factor counts", pos)
    end = max(im["offset"] + im["length"], fi["offset"] + fi["length"])
    if len(blob) != end:
        raise DatasetFormatError(f"blob is {len(blob)} bytes, manifest declares {end}", pos + min(len(blob), end))
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise DatasetFormatError("blob checksum mismatch", pos)
    images = np.frombuffer(blob, dtype="<f4", count=n * d, offset=im["offset"]).reshape(n, d)
    idx = np.frombuffer(blob, dtype="<u2", count=n * nf, offset=fi["offset"]).reshape(n, nf)
    return LabeledDataset(
        images.astype(np.float64), idx.astype(np.int64), _grid_from_json(manifest["factors"]),
        image_side=int(manifest["image_side"]), provenance=manifest["provenance"],
        kind=manifest["kind"], seed=int(manifest["seed"]), meta=manifest.get("meta", {}))
