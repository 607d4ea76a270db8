"""Distance correlation between volatility series and the pairwise dependency matrix."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from numba import njit

from .market_data import ReturnPanel, UniverseSnapshot, VolPanel

THREADS_ENV = "GRAPHFOLIO_THREADS"


def resolve_workers(workers: int | None = None) -> int:
    """Explicit ``workers``, else ``$GRAPHFOLIO_THREADS``, else the CPU count."""
    if workers is None:
        env = os.environ.get(THREADS_ENV)
        workers = int(env) if env else (os.cpu_count() or 1)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


def _as_series(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 1:
        raise ValueError("expected a one-dimensional series")
    return a


def _centered_distances(x: np.ndarray) -> np.ndarray:
    A = np.abs(x[:, None] - x[None, :])
    row = A.mean(axis=1)
    return A - row[:, None] - row[None, :] + row.mean()


def distance_covariance(a, b) -> float:
    """Squared sample distance covariance: mean of the product of the double-centered
    distance matrices. Negative round-off is clamped to zero."""
    a, b = _as_series(a), _as_series(b)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least 2 observations")
    v = float((_centered_distances(a) * _centered_distances(b)).mean())
    return max(v, 0.0)


def distance_correlation(a, b) -> float:
    """Distance correlation in [0, 1]; 0 when either series is constant."""
    dab = distance_covariance(a, b)
    daa = distance_covariance(a, a)
    dbb = distance_covariance(b, b)
    if daa <= 0.0 or dbb <= 0.0:
        return 0.0
    return min(dab / np.sqrt(daa * dbb), 1.0)


@dataclass(frozen=True)
class DependencyMatrix:
    as_of: pd.Timestamp
    firms: list[str]
    values: np.ndarray
    min_overlap: int = 60

    def __post_init__(self):
        v = self.values
        if v.shape != (len(self.firms), len(self.firms)):
            raise ValueError("dependency matrix shape does not match firm list")

    @property
    def n(self) -> int:
        return len(self.firms)


@dataclass(frozen=True)
class CovMatrix:
    as_of: pd.Timestamp
    firms: list[str]
    values: np.ndarray
    means: np.ndarray
    missing_pairs: list[tuple[str, str]] = field(default_factory=list)


@njit(cache=True, nogil=True)
def _cross_term(C, y):
    # sum_ij C_ij |y_i - y_j| / m^2 over the upper triangle (both factors symmetric, zero diagonal on |.|)
    m = y.shape[0]
    total = 0.0
    for i in range(m):
        yi = y[i]
        row = 0.0
        for j in range(i + 1, m):
            row += C[i, j] * abs(yi - y[j])
        total += row
    return 2.0 * total / (m * m)


class _PairKernel:
    """dcor over overlapping date ranges of contiguous series.

    Each firm's valid dates within the window form one interval, so a pair's
    overlap is an interval too. Self distance covariances over the firm's full
    interval are computed once; the row firm's centered matrix is cached while
    a worker walks consecutive pairs of the same row.
    """

    def __init__(self, series: np.ndarray, min_overlap: int):
        self.series = series  # window x firms, NaN outside each firm's interval
        self.min_overlap = min_overlap
        n = series.shape[1]
        self.lo = np.zeros(n, dtype=int)
        self.hi = np.zeros(n, dtype=int)
        for j in range(n):
            idx = np.flatnonzero(~np.isnan(series[:, j]))
            if idx.size:
                if idx[-1] - idx[0] + 1 != idx.size:
                    raise ValueError("volatility series must be contiguous within the window")
                self.lo[j], self.hi[j] = idx[0], idx[-1] + 1
        self.self_dcov = np.full(n, np.nan)

    def self_term(self, j: int) -> None:
        x = self.series[self.lo[j]:self.hi[j], j]
        if x.size >= 2:
            C = _centered_distances(x)
            self.self_dcov[j] = max(float((C * C).mean()), 0.0)

    def run_block(self, pairs: list[tuple[int, int]], out: np.ndarray) -> None:
        cache_key = None
        cache = None
        for i, j in pairs:
            lo = max(self.lo[i], self.lo[j])
            hi = min(self.hi[i], self.hi[j])
            m = hi - lo
            if m < self.min_overlap or m < 2:
                out[i, j] = out[j, i] = 0.0
                continue
            if cache_key != (i, lo, hi):
                cache_key = (i, lo, hi)
                x = self.series[lo:hi, i]
                cache = _centered_distances(x)
                cache_dxx = max(float((cache * cache).mean()), 0.0)
            y = np.ascontiguousarray(self.series[lo:hi, j])
            # centering one factor suffices: rows/cols of the centered matrix sum to 0
            dxy = max(_cross_term(cache, y), 0.0)
            if lo == self.lo[j] and hi == self.hi[j]:
                dyy = self.self_dcov[j]
            else:
                Cy = _centered_distances(y)
                dyy = max(float((Cy * Cy).mean()), 0.0)
            if cache_dxx <= 0.0 or dyy <= 0.0:
                val = 0.0
            else:
                val = min(dxy / np.sqrt(cache_dxx * dyy), 1.0)
            out[i, j] = out[j, i] = val


def _blocks(items: list, k: int) -> list[list]:
    """Split ``items`` into ``k`` contiguous blocks of near-equal size."""
    n = len(items)
    bounds = [round(n * b / k) for b in range(k + 1)]
    return [items[bounds[b]:bounds[b + 1]] for b in range(k)]


def dependency_from_series(series: np.ndarray, min_overlap: int = 60, workers: int | None = None) -> np.ndarray:
    """Dense dcor matrix for the columns of ``series`` (window x firms, NaN = absent)."""
    workers = resolve_workers(workers)
    n = series.shape[1]
    kernel = _PairKernel(np.asarray(series, dtype=float), min_overlap)
    out = np.zeros((n, n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if workers == 1:
        for j in range(n):
            kernel.self_term(j)
        kernel.run_block(pairs, out)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(kernel.self_term, range(n)))
            blocks = _blocks(pairs, workers)
            list(pool.map(lambda blk: kernel.run_block(blk, out), blocks))
    diag = np.where(np.nan_to_num(kernel.self_dcov) > 0, 1.0, 0.0)
    np.fill_diagonal(out, diag)
    return out


def pairwise_dependency_matrix(
    vols: VolPanel,
    snapshot: UniverseSnapshot,
    min_overlap: int = 60,
    workers: int | None = None,
) -> DependencyMatrix:
    """dcor of every snapshot pair's volatility series, aligned on common dates
    within the snapshot window. Pairs overlapping fewer than ``min_overlap``
    days get 0. Output does not depend on ``workers``."""
    missing = [f for f in snapshot.firms if f not in vols.vols.columns]
    if missing:
        raise KeyError(f"firms missing from volatility panel: {missing[:5]}")
    series = vols.vols.reindex(index=snapshot.window, columns=snapshot.firms).to_numpy(dtype=float)
    values = dependency_from_series(series, min_overlap, workers)
    return DependencyMatrix(snapshot.as_of, list(snapshot.firms), values, min_overlap)


def sample_covariance(returns: ReturnPanel, snapshot: UniverseSnapshot) -> CovMatrix:
    """Population covariance of daily returns over the snapshot window, using
    pairwise-complete observations. Pairs with fewer than 2 common days get 0
    and are listed in ``missing_pairs``."""
    block = returns.returns.reindex(index=snapshot.window, columns=snapshot.firms).to_numpy(dtype=float)
    valid = ~np.isnan(block)
    counts = valid.sum(axis=0)
    short = [snapshot.firms[j] for j in np.flatnonzero(counts < 2)]
    if short:
        raise ValueError(f"fewer than 2 observations for firms: {short[:5]}")
    X = np.where(valid, block, 0.0)
    V = valid.astype(float)
    means = X.sum(axis=0) / counts
    n_ij = V.T @ V
    s_xy = X.T @ X
    s_x = X.T @ V  # s_x[i, j] = sum of x_i over days where j is also observed
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = s_xy / n_ij - (s_x * s_x.T) / (n_ij * n_ij)
    bad = n_ij < 2
    cov[bad] = 0.0
    cov = (cov + cov.T) / 2.0
    d = np.diag(cov).copy()
    d[d < 0] = 0.0  # round-off on constant series
    np.fill_diagonal(cov, d)
    firms = snapshot.firms
    missing = [(firms[i], firms[j]) for i, j in zip(*np.nonzero(np.triu(bad, 1)))]
    return CovMatrix(snapshot.as_of, list(firms), cov, means, missing)


def write_dependency_csv(dep: DependencyMatrix, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["firm_id", *dep.firms])
        for f, row in zip(dep.firms, dep.values):
            w.writerow([f, *(f"{v:.12g}" for v in row)])


def read_dependency_csv(path, as_of=None, min_overlap: int = 60) -> DependencyMatrix:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "firm_id":
        raise ValueError(f"{path}: missing firm_id header")
    firms = rows[0][1:]
    if [r[0] for r in rows[1:]] != firms:
        raise ValueError(f"{path}: row labels do not match column labels")
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    ts = pd.Timestamp(as_of) if as_of is not None else None
    return DependencyMatrix(ts, firms, values, min_overlap)
