"""
Dataset loading and preparation
Reads CSV tables, windows multivariate series, standardizes, splits, and keeps
the observed/missing bookkeeping every other module relies on
"""

import csv
import logging
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

DEGENERATE_STD = 1e-12


class DatasetError(ValueError):
    """Raised for malformed input data"""


def _binary(mask, name: str, shape: Tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(mask, dtype=np.float64)
    if arr.shape != shape:
        raise DatasetError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise DatasetError(f"{name} must be binary")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


class MaskedDataset:
    """
    Value matrix with its masks

    x holds values [N x D]; m marks observed entries (1 = observed); a marks
    observed entries hidden artificially (a <= m); known marks entries whose
    value in x is ground truth (known >= m, 0.0 placeholder elsewhere).
    axis_meta = (K features, L time steps) for windowed series, row layout
    feature-major then time.
    """

    def __init__(self, x: np.ndarray, m: np.ndarray, a: Optional[np.ndarray] = None,
                 axis_meta: Optional[Tuple[int, int]] = None, known: Optional[np.ndarray] = None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise DatasetError(f"x must be 2-D, got shape {x.shape}")
        m = _binary(m, 'm', x.shape)
        known = m.copy() if known is None else _binary(known, 'known', x.shape)
        if np.any(m > known):
            raise DatasetError("Observed entries must have known values")
        if a is not None:
            a = _binary(a, 'a', x.shape)
            if np.any(a > m):
                raise DatasetError("Artificial mask must satisfy a <= m")
        if not np.all(np.isfinite(x[known == 1.0])):
            raise DatasetError("x must be finite wherever the value is known")
        if axis_meta is not None:
            n_features, window_len = (int(v) for v in axis_meta)
            if n_features * window_len != x.shape[1]:
                raise DatasetError(f"axis_meta {axis_meta} does not match D={x.shape[1]}")
            axis_meta = (n_features, window_len)

        self.x = _frozen(np.where(known == 1.0, x, 0.0))
        self.m = _frozen(m)
        self.known = _frozen(known)
        self.a = None if a is None else _frozen(a)
        self.axis_meta = axis_meta

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    @property
    def n_cols(self) -> int:
        return self.x.shape[1]

    def observed_values(self) -> np.ndarray:
        """X^obs with zeros at missing entries"""
        return np.where(self.m == 1.0, self.x, 0.0)

    def missing_ratio(self) -> float:
        return float(1.0 - self.m.mean()) if self.m.size else 0.0

    def original_missing_mask(self) -> np.ndarray:
        """Entries missing in m whose ground truth is known"""
        return (1.0 - self.m) * self.known

    def with_masks(self, m: Optional[np.ndarray] = None, a: Optional[np.ndarray] = None) -> 'MaskedDataset':
        return MaskedDataset(self.x, self.m if m is None else m, a, self.axis_meta, self.known)

    def take_rows(self, rows: Sequence[int]) -> 'MaskedDataset':
        rows = np.asarray(rows, dtype=int)
        a = None if self.a is None else self.a[rows]
        return MaskedDataset(self.x[rows], self.m[rows], a, self.axis_meta, self.known[rows])

    def __repr__(self) -> str:
        return (f"MaskedDataset(N={self.n_rows}, D={self.n_cols}, missing={self.missing_ratio():.3f}, "
                f"axis_meta={self.axis_meta})")


class NormStats:
    """Per-column mean and population std over observed entries"""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise DatasetError("NormStats mean/std must be 1-D arrays of equal length")
        if np.any(self.std <= 0.0):
            raise DatasetError("NormStats std must be positive")

    def to_dict(self) -> dict:
        return {'mean': [float(v) for v in self.mean], 'std': [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: dict) -> 'NormStats':
        return cls(np.array(data['mean']), np.array(data['std']))


def _parse_cell(text: Any) -> float:
    # float() gives the correctly rounded double; NaN marks both missing and unparseable cells
    try:
        return float(text)
    except (TypeError, ValueError):
        return np.nan


def load_csv(path: str, has_header: bool = False, missing_token: str = 'NaN') -> MaskedDataset:
    """
    Load a rectangular numeric CSV table

    Args:
        path: CSV file (UTF-8, comma separated)
        has_header: Skip the first row
        missing_token: Cell text marking a missing value (empty cells are missing too)

    Returns:
        MaskedDataset with 0.0 placeholders at missing entries
    """
    with open(path, 'r', encoding='utf-8', newline='') as f:
        rows = [row for row in csv.reader(f) if row]

    if has_header and rows:
        rows = rows[1:]
    if not rows:
        raise DatasetError(f"{path}: no rows")

    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            line = i + 2 if has_header else i + 1
            raise DatasetError(f"{path}: row {line} has {len(row)} cells, expected {width}")

    cells = pd.DataFrame(rows).apply(lambda col: col.str.strip())
    missing = cells.isin([missing_token, ''])
    values = cells.mask(missing).map(_parse_cell)
    unparseable = values.isna() & ~missing
    if unparseable.to_numpy().any():
        r, c = np.argwhere(unparseable.to_numpy())[0]
        line = r + 2 if has_header else r + 1
        raise DatasetError(f"{path}: cannot parse {cells.iat[r, c]!r} at row {line}, column {c + 1}")

    x = values.to_numpy(dtype=np.float64)
    m = (~missing.to_numpy()).astype(np.float64)
    logger.info(f"[DATA] Loaded {x.shape[0]}x{x.shape[1]} table from {path} "
                f"({(1.0 - m.mean()) * 100:.1f}% missing)")
    return MaskedDataset(np.nan_to_num(x, nan=0.0), m)


def save_csv(path: str, values: np.ndarray, header: Optional[List[str]] = None) -> str:
    """
    Dump a matrix as CSV with shortest-repr floats (exact round trip)

    Args:
        path: Output path
        values: 2-D array; NaN is written as 'NaN'
        header: Optional column names

    Returns:
        The path written
    """
    frame = pd.DataFrame(np.asarray(values, dtype=np.float64))
    text = frame.map(lambda v: 'NaN' if np.isnan(v) else repr(float(v)))
    text.to_csv(path, index=False, header=header if header is not None else False)
    return path


def window_series(series: np.ndarray, window_len: int, stride: int = 1,
                  mask: Optional[np.ndarray] = None, known: Optional[np.ndarray] = None) -> MaskedDataset:
    """
    Cut a [T_total x K] series into flattened windows

    Args:
        series: Values; NaN marks unknown entries
        window_len: L
        stride: Step between window starts
        mask: Optional observed mask for the series (defaults to finite entries)
        known: Optional ground-truth-known mask (defaults to finite entries)

    Returns:
        MaskedDataset with axis_meta (K, L); row index k*L + t
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise DatasetError(f"Series must be [T_total x K], got shape {series.shape}")
    total, n_features = series.shape
    if window_len < 1 or window_len > total:
        raise DatasetError(f"Window length {window_len} exceeds series length {total}")
    if stride < 1:
        raise DatasetError(f"Stride must be >= 1, got {stride}")

    finite = np.isfinite(series).astype(np.float64)
    known = finite if known is None else np.asarray(known, dtype=np.float64) * finite
    mask = known if mask is None else np.asarray(mask, dtype=np.float64) * known
    values = np.where(known == 1.0, series, 0.0)

    n_windows = (total - window_len) // stride + 1
    starts = np.arange(n_windows) * stride

    def _cut(arr: np.ndarray) -> np.ndarray:
        # [N, L, K] -> [N, K, L] -> [N, K*L]
        windows = np.stack([arr[s:s + window_len] for s in starts])
        return windows.transpose(0, 2, 1).reshape(n_windows, n_features * window_len)

    return MaskedDataset(_cut(values), _cut(mask), axis_meta=(n_features, window_len), known=_cut(known))


def compute_norm_stats(ds: MaskedDataset) -> NormStats:
    """Population mean/std per column over observed entries"""
    counts = ds.m.sum(axis=0)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DatasetError(f"Column {int(empty[0])} has no observed entries")
    mean = (ds.x * ds.m).sum(axis=0) / counts
    var = (((ds.x - mean) * ds.m) ** 2).sum(axis=0) / counts
    std = np.sqrt(var)
    std = np.where(std < DEGENERATE_STD, 1.0, std)
    return NormStats(mean, std)


def standardize(ds: MaskedDataset, stats: Optional[NormStats] = None) -> Tuple[MaskedDataset, NormStats]:
    """
    Standardize columns with given or self-computed stats

    Args:
        ds: Dataset
        stats: Stats to apply (computed from ds's observed entries when absent)

    Returns:
        (standardized dataset with unchanged masks, stats used)
    """
    if stats is None:
        stats = compute_norm_stats(ds)
    elif stats.mean.shape[0] != ds.n_cols:
        raise DatasetError(f"NormStats cover {stats.mean.shape[0]} columns, dataset has {ds.n_cols}")

    z = np.where(ds.known == 1.0, (ds.x - stats.mean) / stats.std, 0.0)
    return MaskedDataset(z, ds.m, ds.a, ds.axis_meta, ds.known), stats


def unstandardize(z: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map standardized values back to data units"""
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


def _split_sizes(n: int, ratios: Sequence[float]) -> List[int]:
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise DatasetError(f"Split ratios must be three non-negative numbers, got {ratios}")
    if sum(ratios) > 1.0 + 1e-9:
        raise DatasetError(f"Split ratios sum to {sum(ratios)} > 1")

    sizes = [int(np.floor(r * n + 1e-9)) for r in ratios]
    if abs(sum(ratios) - 1.0) <= 1e-9:
        sizes[0] = n - sizes[1] - sizes[2]
    for name, r, size in zip(('train', 'valid', 'test'), ratios, sizes):
        if r > 0 and size == 0:
            raise DatasetError(f"Split '{name}' would be empty for N={n} and ratio {r}")
    return sizes


def split(ds: MaskedDataset, ratios: Sequence[float], seed: int,
          shuffle: bool = True) -> Tuple[MaskedDataset, MaskedDataset, MaskedDataset]:
    """
    Partition rows into train/valid/test

    When ratios sum to 1 the rounding remainder goes to train and every row
    lands in exactly one split; otherwise leftover rows are dropped.

    Args:
        ds: Dataset
        ratios: (train, valid, test)
        seed: Shuffle seed
        shuffle: Shuffle rows before cutting (otherwise keep row order)

    Returns:
        (train, valid, test)
    """
    sizes = _split_sizes(ds.n_rows, ratios)
    order = np.random.default_rng(seed).permutation(ds.n_rows) if shuffle else np.arange(ds.n_rows)
    cuts = np.cumsum([0] + sizes)
    parts = [ds.take_rows(order[cuts[i]:cuts[i + 1]]) for i in range(3)]
    logger.info(f"[DATA] Split {ds.n_rows} rows into {sizes[0]}/{sizes[1]}/{sizes[2]}")
    return parts[0], parts[1], parts[2]


def split_timeline(n_steps: int, ratios: Sequence[float]) -> List[Tuple[int, int]]:
    """Contiguous (start, stop) blocks of a timeline for train/valid/test"""
    sizes = _split_sizes(n_steps, ratios)
    cuts = np.cumsum([0] + sizes)
    return [(int(cuts[i]), int(cuts[i + 1])) for i in range(3)]


def generate_ar1_series(n_steps: int, n_features: int, coef: float = 0.8, noise_std: float = 1.0,
                        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Independent AR(1) series per feature, started from the stationary law

    Args:
        n_steps: Timeline length
        n_features: K
        coef: Autoregressive coefficient (|coef| < 1)
        noise_std: Innovation standard deviation
        rng: Random generator

    Returns:
        [n_steps x n_features] array
    """
    if not abs(coef) < 1.0:
        raise DatasetError(f"AR(1) coefficient must satisfy |coef| < 1, got {coef}")
    rng = rng or np.random.default_rng()
    series = np.empty((n_steps, n_features))
    stationary_std = noise_std / np.sqrt(1.0 - coef ** 2)
    series[0] = rng.normal(0.0, stationary_std, size=n_features)
    innovations = rng.normal(0.0, noise_std, size=(n_steps, n_features))
    for t in range(1, n_steps):
        series[t] = coef * series[t - 1] + innovations[t]
    return series
