"""Sampling, storage, and standardisation of black-box input/output data.

All modelling downstream of this module works in a standardised space; the
functions here own the mapping between the original space and that space.
Datasets are immutable: every transforming operation returns a new instance.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DataFormatError,
    DegenerateSplitError,
    ParameterError,
    ShapeError,
)

SCHEMA_VERSION = 1

# Gray-code Sobol generator. Direction numbers are the published Joe-Kuo
# values (dimensions 2..10); dimension 1 is the van der Corput sequence.
_SOBOL_BITS = 30
_JOE_KUO = {
    2: (1, 0, (1,)),
    3: (2, 1, (1, 3)),
    4: (3, 1, (1, 3, 1)),
    5: (3, 2, (1, 1, 1)),
    6: (4, 1, (1, 1, 3, 3)),
    7: (4, 4, (1, 3, 5, 13)),
    8: (5, 2, (1, 1, 5, 5, 17)),
    9: (5, 4, (1, 1, 5, 5, 5)),
    10: (5, 7, (1, 1, 7, 11, 19)),
}
SOBOL_MAX_DIM = max(_JOE_KUO)


@dataclass(frozen=True)
class SearchSpace:
    """Axis-aligned box of input bounds, one (lower, upper) pair per dimension."""

    bounds: tuple[tuple[float, float], ...]

    def __init__(self, bounds):
        bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        if len(bounds) < 1:
            raise ParameterError("search space needs at least one dimension")
        for j, (lo, hi) in enumerate(bounds):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ParameterError(f"non-finite bound in dimension {j}")
            if not lo < hi:
                raise ParameterError(f"lower >= upper in dimension {j}: [{lo}, {hi}]")
        object.__setattr__(self, "bounds", bounds)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def corners(self) -> np.ndarray:
        """All 2^m corner points of the box."""
        m = self.dim
        out = np.zeros((2**m, m))
        for i in range(2**m):
            for j in range(m):
                out[i, j] = self.bounds[j][(i >> j) & 1]
        return out


@dataclass(frozen=True)
class Scaler:
    """Per-column standardisation moments. Zero-variance columns are guarded."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_data(cls, values: np.ndarray) -> "Scaler":
        mean = np.mean(values, axis=0)
        std = np.std(values, axis=0)
        if np.any(std == 0.0):
            warnings.warn(
                "zero-variance column encountered during standardisation; "
                "its scale is guarded to 1",
                stacklevel=3,
            )
            std = np.where(std == 0.0, 1.0, std)
        return cls(mean=mean, std=std)

    def scale(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.mean.shape[0]:
            raise ShapeError(
                f"expected trailing dimension {self.mean.shape[0]}, "
                f"got {values.shape[-1]}"
            )
        return (values - self.mean) / self.std

    def inv_scale(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.mean.shape[0]:
            raise ShapeError(
                f"expected trailing dimension {self.mean.shape[0]}, "
                f"got {values.shape[-1]}"
            )
        return values * self.std + self.mean


@dataclass(frozen=True)
class Dataset:
    """Input/output/convergence data with split indices and scaler moments.

    Attributes
    ----------
    x : ndarray of shape (n, m)
        Input samples in the original space.
    y : ndarray of shape (n, p)
        Output samples in the original space.
    t : ndarray of shape (n,) or None
        Binary convergence targets; 1 marks a successful evaluation.
    space : SearchSpace
        Box the inputs were sampled from.
    train_idx, test_idx : ndarray of int or None
        Disjoint, covering index sets once :func:`split` has run.
    x_scaler, y_scaler : Scaler or None
        Standardisation moments, populated by :func:`standardize`.
    """

    x: np.ndarray
    y: np.ndarray
    space: SearchSpace
    t: np.ndarray | None = None
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    x_scaler: Scaler | None = field(default=None)
    y_scaler: Scaler | None = field(default=None)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
        if x.shape[1] != self.space.dim:
            raise ShapeError(
                f"x has {x.shape[1]} columns but the space has {self.space.dim}"
            )
        if self.t is not None:
            t = np.asarray(self.t, dtype=float).reshape(-1)
            if t.shape[0] != x.shape[0]:
                raise ShapeError(f"t has {t.shape[0]} rows but x has {x.shape[0]}")
            if not np.all(np.isin(t, (0.0, 1.0))):
                raise DataFormatError("t entries must all be 0 or 1")
            object.__setattr__(self, "t", t)
        lo, hi = self.space.lower, self.space.upper
        # tolerate round-off at the box faces
        atol = 1e-9 * np.maximum(1.0, np.abs(hi - lo))
        bad = np.where(
            np.any(x < lo - atol, axis=1) | np.any(x > hi + atol, axis=1)
        )[0]
        if bad.size:
            raise DataFormatError(
                f"input rows outside the search space bounds: {bad.tolist()}"
            )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def is_split(self) -> bool:
        return self.train_idx is not None

    @property
    def is_scaled(self) -> bool:
        return self.x_scaler is not None

    # -- views ------------------------------------------------------------
    @property
    def x_train(self) -> np.ndarray:
        return self.x[self.train_idx] if self.is_split else self.x

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train_idx] if self.is_split else self.y

    @property
    def t_train(self) -> np.ndarray | None:
        if self.t is None:
            return None
        return self.t[self.train_idx] if self.is_split else self.t

    @property
    def x_test(self) -> np.ndarray:
        return self.x[self.test_idx] if self.is_split else self.x[:0]

    @property
    def y_test(self) -> np.ndarray:
        return self.y[self.test_idx] if self.is_split else self.y[:0]

    @property
    def t_test(self) -> np.ndarray | None:
        if self.t is None:
            return None
        return self.t[self.test_idx] if self.is_split else self.t[:0]

    def _need_scalers(self):
        if not self.is_scaled:
            raise ParameterError("dataset has no scalers; call standardize() first")

    def scale_x(self, x):
        self._need_scalers()
        return self.x_scaler.scale(x)

    def inv_scale_x(self, x):
        self._need_scalers()
        return self.x_scaler.inv_scale(x)

    def scale_y(self, y):
        self._need_scalers()
        return self.y_scaler.scale(y)

    def inv_scale_y(self, y):
        self._need_scalers()
        return self.y_scaler.inv_scale(y)

    def scale_space(self, space: SearchSpace | None = None) -> SearchSpace:
        """Map box bounds into the standardised space (default: own bounds)."""
        self._need_scalers()
        space = space if space is not None else self.space
        lo = self.x_scaler.scale(space.lower)
        hi = self.x_scaler.scale(space.upper)
        return SearchSpace(list(zip(lo, hi)))

    @property
    def x_scaled(self) -> np.ndarray:
        return self.scale_x(self.x)

    @property
    def y_scaled(self) -> np.ndarray:
        return self.scale_y(self.y)

    def with_rows(self, x_new, y_new, t_new=None) -> "Dataset":
        """Append evaluation rows, dropping any split/scalers (they go stale)."""
        x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
        y_new = np.asarray(y_new, dtype=float)
        if y_new.ndim == 1:
            y_new = y_new.reshape(x_new.shape[0], -1)
        t = None
        if self.t is not None:
            if t_new is None:
                raise ParameterError("dataset has targets; new rows need t values")
            t = np.concatenate([self.t, np.asarray(t_new, dtype=float).reshape(-1)])
        elif t_new is not None:
            raise ParameterError("dataset has no targets; drop t for new rows")
        return Dataset(
            x=np.vstack([self.x, x_new]),
            y=np.vstack([self.y, y_new]),
            t=t,
            space=self.space,
        )


# ---------------------------------------------------------------------------
# static sampling


def _sobol_direction_numbers(dim: int) -> list[int]:
    if dim == 1:
        return [1 << (_SOBOL_BITS - j - 1) for j in range(_SOBOL_BITS)]
    s, a, m_init = _JOE_KUO[dim]
    m = list(m_init)
    for k in range(s, _SOBOL_BITS):
        new = m[k - s] ^ (m[k - s] << s)
        for i in range(1, s):
            if (a >> (s - 1 - i)) & 1:
                new ^= m[k - i] << i
        m.append(new)
    return [m[j] << (_SOBOL_BITS - j - 1) for j in range(_SOBOL_BITS)]


def sobol_unit(n: int, m: int) -> np.ndarray:
    """First ``n`` points of the base-2 Sobol sequence on the unit cube."""
    if m > SOBOL_MAX_DIM:
        raise ParameterError(
            f"Sobol sampling supports up to {SOBOL_MAX_DIM} dimensions, got {m}"
        )
    directions = [_sobol_direction_numbers(j + 1) for j in range(m)]
    out = np.zeros((n, m))
    state = [0] * m
    for i in range(1, n):
        # index of the lowest zero bit of i-1 drives the Gray-code update
        c = 0
        val = i - 1
        while val & 1:
            val >>= 1
            c += 1
        for j in range(m):
            state[j] ^= directions[j][c]
            out[i, j] = state[j] / float(1 << _SOBOL_BITS)
    return out


def _lhs_unit(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Latin hypercube on the unit cube: one point per stratum per dimension.

    Several candidate designs are drawn and the one with the largest minimum
    pairwise distance is kept (maximin heuristic).
    """
    n_candidates = 16 if n * m <= 4096 else 4
    best, best_score = None, -np.inf
    for _ in range(n_candidates):
        u = np.zeros((n, m))
        for j in range(m):
            u[:, j] = (rng.permutation(n) + rng.uniform(size=n)) / n
        if n == 1:
            return u
        d2 = np.sum((u[:, None, :] - u[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        score = d2.min()
        if score > best_score:
            best, best_score = u, score
    return best


def _grid(n: int, space: SearchSpace, rng: np.random.Generator) -> np.ndarray:
    m = space.dim
    n_grid = int(math.ceil(n ** (1.0 / m) - 1e-9))
    while n_grid**m < n:
        n_grid += 1
    if n_grid**m > 10_000_000:
        raise ParameterError(
            f"grid of {n_grid}^{m} points is too large; reduce n or dimensions"
        )
    axes = [np.linspace(lo, hi, n_grid) for lo, hi in space.bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    full = np.column_stack([g.ravel() for g in mesh])
    order = rng.permutation(full.shape[0])
    return full[order[:n]]


def sample_static(strategy: str, n: int, space: SearchSpace, seed: int = 0) -> np.ndarray:
    """Generate ``n`` input points inside ``space``.

    Strategies: ``random`` (uniform), ``lhs`` (maximin Latin hypercube),
    ``sobol`` (base-2 quasi-random sequence), ``grid`` (evenly spaced values
    per dimension, full Cartesian product shuffled and truncated to ``n``).
    Deterministic for a fixed ``(strategy, n, space, seed)``; the shuffles use
    NumPy's seeded PCG64 generator.
    """
    if n < 1:
        raise ParameterError("requested an empty sample set (n must be >= 1)")
    rng = np.random.default_rng(seed)
    lo, hi = space.lower, space.upper
    if strategy == "random":
        return lo + rng.uniform(size=(n, space.dim)) * (hi - lo)
    if strategy == "lhs":
        return lo + _lhs_unit(n, space.dim, rng) * (hi - lo)
    if strategy == "sobol":
        if n & (n - 1) != 0:
            warnings.warn(
                f"Sobol sample count {n} is not a power of 2; "
                "space-filling balance is degraded",
                stacklevel=2,
            )
        return lo + sobol_unit(n, space.dim) * (hi - lo)
    if strategy == "grid":
        return _grid(n, space, rng)
    raise ParameterError(f"unknown sampling strategy: {strategy!r}")


# ---------------------------------------------------------------------------
# split / standardise


def split(ds: Dataset, test_fraction: float, seed: int = 0) -> Dataset:
    """Reserve ``round(test_fraction * n)`` rows for testing, uniformly at random."""
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError("test_fraction must lie strictly between 0 and 1")
    if ds.n < 2:
        raise ParameterError("need at least 2 rows to split")
    n_test = int(round(test_fraction * ds.n))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    if train_idx.size == 0:
        raise DegenerateSplitError("split left the training set empty")
    return replace(ds, train_idx=train_idx, test_idx=test_idx,
                   x_scaler=None, y_scaler=None)


def standardize(ds: Dataset) -> Dataset:
    """Populate scaler moments.

    Input moments come from the training rows (all rows when unsplit). Output
    moments come from the training rows whose convergence target is 1, so that
    failed evaluations do not skew the modelling space; when no row converged
    the guard falls back to all training rows with a warning.
    """
    x_scaler = Scaler.from_data(ds.x_train)
    y_rows = ds.y_train
    t_train = ds.t_train
    if t_train is not None:
        feasible = t_train == 1.0
        if feasible.any():
            y_rows = y_rows[feasible]
        else:
            warnings.warn(
                "no converged rows in the training set; output moments fall "
                "back to all training rows",
                stacklevel=2,
            )
    y_scaler = Scaler.from_data(y_rows)
    return replace(ds, x_scaler=x_scaler, y_scaler=y_scaler)


# ---------------------------------------------------------------------------
# persistence


def _fmt(v: float) -> str:
    return repr(float(v))


def save(ds: Dataset, path) -> None:
    """Write ``data.csv`` and ``meta.json`` under the directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = (
        [f"x{j + 1}" for j in range(ds.m)]
        + [f"y{j + 1}" for j in range(ds.p)]
        + (["t"] if ds.t is not None else [])
    )
    with open(path / "data.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            row = [_fmt(v) for v in ds.x[i]] + [_fmt(v) for v in ds.y[i]]
            if ds.t is not None:
                row.append(str(int(ds.t[i])))
            writer.writerow(row)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "space": [[_fmt(lo), _fmt(hi)] for lo, hi in ds.space.bounds],
        "train_idx": None if ds.train_idx is None else ds.train_idx.tolist(),
        "test_idx": None if ds.test_idx is None else ds.test_idx.tolist(),
        "x_mean": None if ds.x_scaler is None else [_fmt(v) for v in ds.x_scaler.mean],
        "x_std": None if ds.x_scaler is None else [_fmt(v) for v in ds.x_scaler.std],
        "y_mean": None if ds.y_scaler is None else [_fmt(v) for v in ds.y_scaler.mean],
        "y_std": None if ds.y_scaler is None else [_fmt(v) for v in ds.y_scaler.std],
    }
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def load(path) -> Dataset:
    """Read a dataset saved by :func:`save`, enforcing all invariants."""
    path = Path(path)
    try:
        with open(path / "meta.json") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read meta.json: {exc}") from exc
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DataFormatError(
            f"unsupported schema_version {meta.get('schema_version')!r}"
        )
    space = SearchSpace([(float(lo), float(hi)) for lo, hi in meta["space"]])
    m = space.dim
    with open(path / "data.csv", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("data.csv is empty") from None
        has_t = header[-1] == "t"
        p = len(header) - m - (1 if has_t else 0)
        if p < 1 or header[:m] != [f"x{j + 1}" for j in range(m)]:
            raise DataFormatError(f"unexpected CSV header: {header}")
        xs, ys, ts = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(
                    f"row {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise DataFormatError(f"row {lineno}: {exc}") from exc
            xs.append(vals[:m])
            ys.append(vals[m:m + p])
            if has_t:
                if vals[-1] not in (0.0, 1.0):
                    raise DataFormatError(
                        f"row {lineno}: t entry {vals[-1]} is not binary"
                    )
                ts.append(vals[-1])
    x = np.array(xs)
    y = np.array(ys)
    t = np.array(ts) if has_t else None

    def _vec(key):
        return None if meta.get(key) is None else np.array(
            [float(v) for v in meta[key]]
        )

    x_mean, x_std = _vec("x_mean"), _vec("x_std")
    y_mean, y_std = _vec("y_mean"), _vec("y_std")
    return Dataset(
        x=x,
        y=y,
        t=t,
        space=space,
        train_idx=None if meta["train_idx"] is None else np.array(meta["train_idx"]),
        test_idx=None if meta["test_idx"] is None else np.array(meta["test_idx"]),
        x_scaler=None if x_mean is None else Scaler(x_mean, x_std),
        y_scaler=None if y_mean is None else Scaler(y_mean, y_std),
    )
