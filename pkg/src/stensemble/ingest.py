"""Loading, imputation, reshaping and scaling of gridded spatiotemporal data.

Grid files (``grid-csv``) look like::

    #GRID n=2 T=3 L=2 W=1
    t2m,msl
    <L*W cells for variable 0, time 0>
    <L*W cells for variable 0, time 1>
    ...
    <L*W cells for variable n-1, time T-1>

One data line per (variable, time) pair, variable-major. Cells within a
line are lon-major (``lon`` outer, ``lat`` inner). ``NA`` marks a missing
cell. A plain 2D CSV (header of feature names, one row per time step) is
accepted too and skips the reshape.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MISSING = "NA"
_HEADER_RE = re.compile(r"^#GRID\s+n=(\d+)\s+T=(\d+)\s+L=(\d+)\s+W=(\d+)\s*$")


class GridFormatError(ValueError):
    """Raised for malformed grid or matrix files; message names the line."""


@dataclass
class SpatioTemporalGrid:
    """4D array indexed ``[variable, time, lon, lat]``; NaN marks missing cells."""

    values: np.ndarray
    variable_names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4 or min(self.values.shape) < 1:
            raise ValueError(f"grid must be 4D with all dims >= 1, got {self.values.shape}")
        if len(self.variable_names) != self.values.shape[0]:
            raise ValueError("one variable name per variable required")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.values).sum())


@dataclass
class FeatureMatrix:
    """Rows are time steps, columns are flattened (variable, lon, lat) cells."""

    data: np.ndarray
    feature_names: list[str] | None = None
    feature_mins: np.ndarray | None = None
    feature_maxs: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("feature matrix must be 2D")

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    def take(self, rows) -> "FeatureMatrix":
        return FeatureMatrix(self.data[np.asarray(rows)], self.feature_names,
                             self.feature_mins, self.feature_maxs)


@dataclass(frozen=True)
class SyntheticSpec:
    T: int
    F: int
    k_true: int
    separation: float = 10.0
    noise_sigma: float = 0.5
    regime_layout: str = "contiguous"
    seed: int = 0

    def __post_init__(self):
        if min(self.T, self.F, self.k_true) < 1:
            raise ValueError("T, F and k_true must be positive")
        if self.k_true > self.T:
            raise ValueError("k_true cannot exceed T")
        if self.separation <= 0 or self.noise_sigma < 0:
            raise ValueError("separation must be > 0 and noise_sigma >= 0")
        if self.regime_layout not in ("contiguous", "interleaved"):
            raise ValueError(f"unknown regime_layout {self.regime_layout!r}")


def _parse_cells(line: str, lineno: int, expected: int | None) -> list[float]:
    cells = line.split(",")
    if expected is not None and len(cells) != expected:
        raise GridFormatError(
            f"line {lineno}: expected {expected} cells, found {len(cells)} (ragged row)")
    out = []
    for cell in cells:
        cell = cell.strip()
        if cell == MISSING:
            out.append(np.nan)
            continue
        try:
            out.append(float(cell))
        except ValueError:
            raise GridFormatError(f"line {lineno}: non-numeric cell {cell!r}") from None
    return out


def load_grid(path) -> SpatioTemporalGrid:
    """Read a ``grid-csv`` file."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise GridFormatError("line 1: empty file")
    m = _HEADER_RE.match(lines[0].strip())
    if m is None:
        raise GridFormatError("line 1: malformed header, expected '#GRID n=<n> T=<T> L=<L> W=<W>'")
    n, T, L, W = (int(g) for g in m.groups())
    if min(n, T, L, W) < 1:
        raise GridFormatError("line 1: all dims must be >= 1")
    if len(lines) < 2:
        raise GridFormatError("line 2: missing variable-name line")
    names = [s.strip() for s in lines[1].split(",")]
    if len(names) != n:
        raise GridFormatError(f"line 2: expected {n} variable names, found {len(names)}")
    body = [(i + 3, ln) for i, ln in enumerate(lines[2:]) if ln.strip()]
    if len(body) != n * T:
        raise GridFormatError(
            f"line {len(lines)}: row count mismatch, expected {n * T} data rows, found {len(body)}")
    vals = np.empty((n, T, L * W))
    for idx, (lineno, ln) in enumerate(body):
        v, t = divmod(idx, T)
        vals[v, t] = _parse_cells(ln, lineno, L * W)
    return SpatioTemporalGrid(vals.reshape(n, T, L, W), names)


def _fmt(x: float) -> str:
    return MISSING if np.isnan(x) else format(float(x), ".17g")


def write_grid(grid: SpatioTemporalGrid, path) -> None:
    """Write ``grid`` in canonical ``grid-csv`` form."""
    n, T, L, W = grid.dims
    out = [f"#GRID n={n} T={T} L={L} W={W}", ",".join(grid.variable_names)]
    flat = grid.values.reshape(n, T, L * W)
    for v in range(n):
        for t in range(T):
            out.append(",".join(_fmt(x) for x in flat[v, t]))
    Path(path).write_text("\n".join(out) + "\n")


def load_matrix_csv(path) -> FeatureMatrix:
    """Read a plain 2D CSV: a header row of feature names then one row per time step."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise GridFormatError("line 1: empty file")
    names = [s.strip() for s in lines[0].split(",")]
    rows = [_parse_cells(ln, i + 2, len(names)) for i, ln in enumerate(lines[1:]) if ln.strip()]
    if not rows:
        raise GridFormatError("line 2: no data rows")
    return FeatureMatrix(np.array(rows), names)


def write_matrix_csv(m: FeatureMatrix, path) -> None:
    names = m.feature_names or [f"f{j}" for j in range(m.shape[1])]
    out = [",".join(names)]
    out.extend(",".join(_fmt(x) for x in row) for row in m.data)
    Path(path).write_text("\n".join(out) + "\n")


def load_any(path):
    """Dispatch on the first line: ``#GRID`` files give a grid, anything else a matrix."""
    with open(path) as fh:
        first = fh.readline()
    return load_grid(path) if first.startswith("#GRID") else load_matrix_csv(path)


def impute_mean(grid: SpatioTemporalGrid, mode: str = "per_variable") -> SpatioTemporalGrid:
    """Replace missing cells by the mean of observed cells.

    ``mode="per_variable"`` uses each variable's own mean over all
    (time, lon, lat); ``mode="global"`` uses one mean over the whole grid.
    """
    vals = grid.values.copy()
    miss = np.isnan(vals)
    if not miss.any():
        return SpatioTemporalGrid(vals, list(grid.variable_names))
    if mode == "global":
        if miss.all():
            raise ValueError("variable has no observed values")
        vals[miss] = vals[~miss].mean()
    elif mode == "per_variable":
        for v in range(vals.shape[0]):
            mv = miss[v]
            if mv.all():
                raise ValueError(f"variable has no observed values: {grid.variable_names[v]}")
            if mv.any():
                vals[v][mv] = vals[v][~mv].mean()
    else:
        raise ValueError(f"unknown imputation mode {mode!r}")
    return SpatioTemporalGrid(vals, list(grid.variable_names))


def impute_columns(m: FeatureMatrix, mode: str = "per_variable") -> FeatureMatrix:
    """Column-wise (or global) mean imputation for matrices read from 2D CSV."""
    data = m.data.copy()
    miss = np.isnan(data)
    if not miss.any():
        return FeatureMatrix(data, m.feature_names)
    if mode == "global":
        if miss.all():
            raise ValueError("variable has no observed values")
        data[miss] = data[~miss].mean()
        return FeatureMatrix(data, m.feature_names)
    for j in range(data.shape[1]):
        mj = miss[:, j]
        if mj.all():
            raise ValueError(f"variable has no observed values: column {j}")
        if mj.any():
            data[mj, j] = data[~mj, j].mean()
    return FeatureMatrix(data, m.feature_names)


def reshape_to_2d(grid: SpatioTemporalGrid) -> FeatureMatrix:
    """Flatten ``[n, T, L, W]`` to ``[T, n*L*W]``.

    Column order is variable-major, then lon, then lat (innermost).
    """
    if grid.n_missing:
        raise ValueError("grid contains missing cells; impute first")
    n, T, L, W = grid.dims
    data = np.ascontiguousarray(grid.values.transpose(1, 0, 2, 3)).reshape(T, n * L * W)
    names = [f"{name}[{i},{j}]" for name in grid.variable_names
             for i in range(L) for j in range(W)]
    return FeatureMatrix(data, names)


def minmax_normalize(m: FeatureMatrix) -> FeatureMatrix:
    """Per-column min-max scaling to [0, 1]; constant columns become 0."""
    lo = m.data.min(axis=0)
    hi = m.data.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (m.data - lo) / safe, 0.0)
    return FeatureMatrix(out, m.feature_names, lo, hi)


def _place_centroids(rng, k, F, separation, max_tries=10000):
    # Rejection sampling in a box wide enough to fit k points at the required spacing.
    half = separation * max(1.0, k ** (1.0 / F)) * 1.5
    cents = [rng.uniform(-half, half, size=F)]
    tries = 0
    while len(cents) < k:
        cand = rng.uniform(-half, half, size=F)
        if min(np.linalg.norm(cand - c) for c in cents) >= separation:
            cents.append(cand)
        tries += 1
        if tries > max_tries:
            half *= 1.5
            tries = 0
    return np.array(cents)


def generate_synthetic(spec: SyntheticSpec):
    """Regime-switching benchmark: centroid plus Gaussian noise per time step.

    Returns the feature matrix and the ground-truth ``Partition``.
    """
    from .base_cluster import Partition

    rng = np.random.default_rng(spec.seed)
    cents = _place_centroids(rng, spec.k_true, spec.F, spec.separation)
    t = np.arange(spec.T)
    if spec.regime_layout == "contiguous":
        labels = (t * spec.k_true) // spec.T
    else:
        labels = t % spec.k_true
    noise = rng.normal(0.0, 1.0, size=(spec.T, spec.F)) * spec.noise_sigma
    data = cents[labels] + noise
    names = [f"f{j}" for j in range(spec.F)]
    tag = f"synthetic:{spec.regime_layout}:seed={spec.seed}"
    return FeatureMatrix(data, names), Partition(labels.astype(np.int64), spec.k_true, tag)


def prepare(source, impute_mode: str = "per_variable") -> FeatureMatrix:
    """Impute, reshape (grids only) and min-max scale a loaded grid or matrix."""
    if isinstance(source, SpatioTemporalGrid):
        m = reshape_to_2d(impute_mean(source, impute_mode))
    else:
        m = impute_columns(source, impute_mode)
    return minmax_normalize(m)
