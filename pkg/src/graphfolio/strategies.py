"""Allocation strategies: equal weight, network index, mean-variance and GAT."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dependency import CovMatrix
from .gatnet import GatParams, PortfolioWeights, predict_weights
from .market_data import UniverseSnapshot
from .netfilter import CentralityScores, FilteredGraph

KINDS = ("equal", "network_index", "mean_variance", "gat")
ALIASES = {"network": "network_index", "mv": "mean_variance", "ew": "equal"}
KKT_TOL = 1e-6


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    lambda_risk: Optional[float] = None
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if (self.lambda_risk is not None) != (self.kind == "mean_variance"):
            raise ValueError("lambda_risk is required for mean_variance and only for it")
        if self.lambda_risk is not None and self.lambda_risk <= 0:
            raise ValueError("lambda_risk must be positive")
        if self.checkpoint is not None and self.kind != "gat":
            raise ValueError("checkpoint applies to the gat strategy only")

    @property
    def name(self) -> str:
        return self.kind

    @classmethod
    def parse_list(cls, text: str, lambda_risk: float = 1.0) -> list["StrategySpec"]:
        specs = []
        for tok in (t.strip() for t in text.split(",")):
            if not tok:
                continue
            kind = ALIASES.get(tok, tok)
            specs.append(cls(kind, lambda_risk if kind == "mean_variance" else None))
        if not specs:
            raise ValueError("no strategies given")
        return specs


def equal_weight(snapshot: UniverseSnapshot) -> PortfolioWeights:
    n = snapshot.n
    if n == 0:
        raise ValueError("empty snapshot")
    return PortfolioWeights(snapshot.as_of, list(snapshot.firms), np.full(n, 1.0 / n))


def network_index_weights(scores: CentralityScores, firms: Optional[Sequence[str]] = None,
                          as_of=None) -> PortfolioWeights:
    """Weights proportional to ``1 / p_i``. Zero scores are raised to the
    smallest positive score (flagged) before inverting."""
    p = np.asarray(scores.peripherality, dtype=float).copy()
    firms = list(firms) if firms is not None else [str(k) for k in range(p.size)]
    flags: tuple[str, ...] = ()
    if np.any(p <= 0):
        pos = p[p > 0]
        if pos.size == 0:
            return PortfolioWeights(as_of, firms, np.full(p.size, 1.0 / p.size), ("zero_peripherality",))
        p[p <= 0] = pos.min()
        flags = ("zero_peripherality",)
    inv = 1.0 / p
    return PortfolioWeights(as_of, firms, inv / inv.sum(), flags)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum w = 1}`` (sort-based)."""
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def kkt_residual(w: np.ndarray, mu: np.ndarray, cov: np.ndarray, lambda_risk: float,
                 active_tol: float = 0.0) -> float:
    """Largest violation of the simplex KKT conditions for ``max mu.w - lam w'Cw``:
    held assets share one marginal utility, unheld ones do not exceed it."""
    g = mu - 2.0 * lambda_risk * (cov @ w)
    active = w > active_tol
    if not active.any():
        return float("inf")
    nu = g[active].max()
    res = float(np.max(nu - g[active]))
    if (~active).any():
        res = max(res, float(np.max(g[~active] - nu)), 0.0)
    return res


class MeanVarianceError(RuntimeError):
    def __init__(self, message: str, best: np.ndarray, residual: float):
        super().__init__(f"{message} (KKT residual {residual:.3e})")
        self.best = best
        self.residual = residual


def solve_mean_variance(mu: np.ndarray, cov: np.ndarray, lambda_risk: float, tol: float = 1e-10,
                        max_iter: int = 10_000, accept: float = KKT_TOL) -> tuple[np.ndarray, float, int]:
    """Projected gradient ascent on the simplex with Nesterov extrapolation.

    Step ``1/L`` with ``L = 2 lam ||C||_2``; the step halves and momentum
    restarts whenever the objective regresses. Iteration stops once the KKT
    residual falls below ``tol`` times the initial gradient scale. If
    ``max_iter`` runs out first, the best iterate is still returned when its
    residual is within ``accept`` (badly conditioned covariances at large
    ``lambda_risk`` converge slowly). Returns (weights, KKT residual,
    iterations). Starts from equal weights.
    """
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = mu.size
    if cov.shape != (n, n) or not np.allclose(cov, cov.T, rtol=0, atol=1e-14):
        raise ValueError("covariance must be a symmetric matrix matching mu")
    if lambda_risk <= 0:
        raise ValueError("lambda_risk must be positive")

    def obj(w):
        return float(mu @ w - lambda_risk * (w @ cov @ w))

    def grad(w):
        return mu - 2.0 * lambda_risk * (cov @ w)

    L = 2.0 * lambda_risk * max(float(np.linalg.eigvalsh(cov)[-1]), 1e-300)
    step = 1.0 / L
    w = np.full(n, 1.0 / n)
    y = w.copy()
    f = obj(w)
    t = 1.0
    best_w, best_res = w, kkt_residual(w, mu, cov, lambda_risk)
    scale = max(float(np.abs(grad(w)).max()), 1e-300)
    for it in range(1, max_iter + 1):
        w_new = project_simplex(y + step * grad(y))
        f_new = obj(w_new)
        if f_new < f - 1e-15 * max(abs(f), 1.0):
            # regression: restart momentum from the current iterate with half the step
            step *= 0.5
            y = w.copy()
            t = 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_new + ((t - 1.0) / t_new) * (w_new - w)
        w, f, t = w_new, f_new, t_new
        if it % 10 == 0 or it == max_iter:
            res = kkt_residual(w, mu, cov, lambda_risk)
            if res < best_res:
                best_w, best_res = w.copy(), res
            if res <= tol * scale:
                return w, res, it
    if best_res <= accept:
        return best_w, best_res, max_iter
    raise MeanVarianceError("mean-variance solver did not converge", best_w, best_res)


def mean_variance_weights(cov: CovMatrix, lambda_risk: float = 1.0, tol: float = 1e-10,
                          max_iter: int = 10_000, accept: float = KKT_TOL) -> PortfolioWeights:
    """Long-only maximizer of ``mu.w - lambda * w' Sigma w`` on the simplex."""
    w, _, _ = solve_mean_variance(cov.means, cov.values, lambda_risk, tol, max_iter, accept)
    w = np.where(w > 0, w, 0.0)
    w = w / w.sum()
    return PortfolioWeights(cov.as_of, list(cov.firms), w)


def gat_weights(checkpoint: GatParams, snapshot: UniverseSnapshot, g: FilteredGraph) -> PortfolioWeights:
    if checkpoint.in_dim != snapshot.lookback_T:
        raise ValueError(f"checkpoint expects T={checkpoint.in_dim}, snapshot has T={snapshot.lookback_T}")
    if list(g.firms) != list(snapshot.firms):
        raise ValueError("graph and snapshot firm orderings differ")
    return predict_weights(checkpoint, snapshot.feature_matrix, g, snapshot.as_of)


def write_weights_csv(rows: Sequence[tuple[str, PortfolioWeights]], path) -> None:
    """``as_of,firm_id,weight,strategy`` for each (strategy, weights) pair."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["as_of", "firm_id", "weight", "strategy"])
        for strategy, pw in rows:
            d = pw.as_of.strftime("%Y-%m-%d") if pw.as_of is not None else ""
            for f, x in zip(pw.firms, pw.weights):
                w.writerow([d, f, repr(float(x)), strategy])
