"""Rolling quarterly backtest: splits, per-split pipeline, and the metric suite."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from . import gatnet
from .dependency import pairwise_dependency_matrix, sample_covariance
from .gatnet import GatConfig, GatParams, PortfolioWeights, TrainState
from .market_data import (
    PricePanel,
    ReturnPanel,
    active_universe,
    compute_returns,
    compute_volatility_series,
    feature_matrix,
    returns_matrix,
)
from .netfilter import CentralityScores, dense_graph, peripherality_scores, tmfg
from .strategies import (
    StrategySpec,
    equal_weight,
    gat_weights,
    mean_variance_weights,
    network_index_weights,
)

log = logging.getLogger(__name__)

ANNUALIZATION = math.sqrt(252.0)
ROLES = ("train", "val", "test")
FIGURE_CSVS = ("sharpe_over_time.csv", "centrality.csv", "sectors.csv", "turnover.csv", "sparsity.csv")


class BacktestError(RuntimeError):
    pass


@dataclass(frozen=True)
class RollingSplit:
    rebalance_date: pd.Timestamp
    train_window: pd.DatetimeIndex
    val_window: pd.DatetimeIndex
    test_window: pd.DatetimeIndex
    lookback_T: int


def _quarter_starts(calendar: pd.DatetimeIndex) -> list[int]:
    q = calendar.to_period("Q")
    return [0] + [i for i in range(1, len(calendar)) if q[i] != q[i - 1]]


def rolling_splits(calendar: pd.DatetimeIndex, start=None, end=None, lookback_T: int = 756) -> list[RollingSplit]:
    """One split per calendar quarter.

    The rebalance date is the quarter's first trading day and needs
    ``lookback_T`` trading days before it. The test window is that quarter's
    trading days (Q of them); validation is the Q days before the rebalance and
    training the 2Q days before that. The last quarter is kept only if the
    calendar reaches within a week of its end.
    """
    calendar = pd.DatetimeIndex(calendar)
    starts = _quarter_starts(calendar)
    splits = []
    lo = pd.Timestamp(start) if start is not None else None
    hi = pd.Timestamp(end) if end is not None else None
    for k, s in enumerate(starts):
        if s < lookback_T:
            continue
        if k + 1 < len(starts):
            e = starts[k + 1]
        else:
            q_end = calendar[s].to_period("Q").end_time.normalize()
            if calendar[-1] < q_end - pd.Timedelta(days=7):
                continue
            e = len(calendar)
        reb = calendar[s]
        if (lo is not None and reb < lo) or (hi is not None and reb > hi):
            continue
        Q = e - s
        if 3 * Q > s:
            continue
        splits.append(RollingSplit(reb, calendar[s - 3 * Q:s - Q], calendar[s - Q:s], calendar[s:e], lookback_T))
    if not splits:
        raise BacktestError("insufficient history for any rolling split")
    return splits


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class SharpeResult:
    sharpe: Optional[float]
    mean: float
    std: float
    degenerate: bool


def portfolio_sharpe(w, test_returns: np.ndarray) -> SharpeResult:
    """Annualized (x sqrt 252) Sharpe of ``R @ w`` with population std and zero
    risk-free rate. A constant return series yields ``sharpe=None`` with ``degenerate`` set."""
    w = w.weights if isinstance(w, PortfolioWeights) else np.asarray(w, dtype=float)
    R = np.asarray(test_returns, dtype=float)
    if R.shape[0] < 2:
        raise ValueError("need at least 2 test days")
    rp = R @ w
    mu, sd = float(rp.mean()), float(rp.std())
    # a constant series can still give a round-off std from the mean, so test the range
    if sd == 0.0 or np.ptp(rp) == 0.0:
        return SharpeResult(None, mu, 0.0, True)
    return SharpeResult(mu / sd * ANNUALIZATION, mu, sd, False)


@dataclass(frozen=True)
class Turnover:
    new_pct: float
    closed_pct: float
    turnover_pct: float


def excess_turnover(current: PortfolioWeights, previous: PortfolioWeights,
                    entered: set[str], exited: set[str]) -> Turnover:
    """New and closed positions beyond the universe's own entries and exits.

    A position opened in a firm that just entered the universe, or closed in
    one that just left it, is natural churn and not counted. New positions are
    divided by the current holding count, closed positions by the previous
    holding count; results are percentages.
    """
    now = {f for f, x in zip(current.firms, current.weights) if x > 0}
    before = {f for f, x in zip(previous.firms, previous.weights) if x > 0}
    new = len(now - before - set(entered))
    closed = len(before - now - set(exited))
    new_pct = 100.0 * new / len(now) if now else 0.0
    closed_pct = 100.0 * closed / len(before) if before else 0.0
    return Turnover(new_pct, closed_pct, new_pct + closed_pct)


def weighted_centrality(w, scores: CentralityScores) -> dict[str, float]:
    w = w.weights if isinstance(w, PortfolioWeights) else np.asarray(w, dtype=float)
    return {"betweenness": float(w @ scores.betweenness), "degree": float(w @ scores.degree)}


def sector_allocation(w: PortfolioWeights, sectors: Mapping[str, str]) -> dict[str, float]:
    out: dict[str, float] = {}
    for f, x in zip(w.firms, w.weights):
        key = sectors.get(f) or "UNKNOWN"
        out[key] = out.get(key, 0.0) + float(x)
    return dict(sorted(out.items()))


def unallocated_fraction(w: PortfolioWeights) -> float:
    return float(np.count_nonzero(w.weights == 0.0)) / w.weights.size


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class BacktestConfig:
    lookback_T: int = 756
    vol_lookback: int = 30
    min_history: int = 60
    min_overlap: int = 60
    use_tmfg: bool = True
    lambda_risk: float = 1.0
    gat: GatConfig = field(default_factory=GatConfig)
    seed: int = 0
    warm_start: bool = True
    threads: Optional[int] = None
    start: Optional[str] = None
    end: Optional[str] = None


@dataclass
class BacktestReport:
    rows: list[dict[str, Any]]
    skips: list[dict[str, str]]
    strategies: list[str]
    weights: list[dict[str, Any]] = field(default_factory=list)

    def aggregates(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for s in self.strategies:
            rows = [r for r in self.rows if r["strategy"] == s]
            agg: dict[str, Any] = {}
            for role in ROLES:
                vals = [r[f"sharpe_{role}"] for r in rows if r[f"sharpe_{role}"] is not None]
                agg[f"mean_sharpe_{role}"] = float(np.mean(vals)) if vals else None
            agg["sharpe_ma4"] = moving_average([r["sharpe_test"] for r in rows], 4)
            later = [r for r in rows if not r["first_rebalance"]]
            for key in ("new_pct", "closed_pct", "turnover_pct"):
                agg[f"mean_excess_{key}"] = float(np.mean([r[key] for r in later])) if later else None
            agg["mean_unallocated_fraction"] = float(np.mean([r["unallocated_fraction"] for r in rows])) if rows else None
            out[s] = agg
        return out

    def to_json(self) -> str:
        doc = {
            "schema": "graphfolio.backtest/1",
            "strategies": self.strategies,
            "rows": self.rows,
            "aggregates": self.aggregates(),
            "skips": self.skips,
            "weights": self.weights,
        }
        return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BacktestReport":
        doc = json.loads(text)
        return cls(doc["rows"], doc["skips"], doc["strategies"], doc.get("weights", []))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, pd.Timestamp):
        return x.strftime("%Y-%m-%d")
    return x


def moving_average(values: Sequence[Optional[float]], k: int) -> list[Optional[float]]:
    """Trailing k-period mean; a window containing a missing value yields None."""
    out = []
    for i in range(k - 1, len(values)):
        win = values[i - k + 1:i + 1]
        out.append(None if any(v is None for v in win) else float(np.mean(win)))
    return out


def _prepare_split(rets: ReturnPanel, vols, split: RollingSplit, cfg: BacktestConfig):
    snap = active_universe(rets, split.rebalance_date, cfg.lookback_T, cfg.min_history)
    if snap.n < 4:
        raise BacktestError(f"universe has {snap.n} firms; need at least 4")
    dep = pairwise_dependency_matrix(vols, snap, cfg.min_overlap, cfg.threads)
    graph = tmfg(dep) if cfg.use_tmfg else dense_graph(dep)
    scores = peripherality_scores(graph)
    cov = sample_covariance(rets, snap)
    R = {role: returns_matrix(rets, snap.firms, getattr(split, f"{role}_window")) for role in ROLES}
    return snap, graph, scores, cov, R


def _strategy_weights(spec: StrategySpec, snap, graph, scores, cov, cfg: BacktestConfig,
                      rets: ReturnPanel, split: RollingSplit, R, gat_state: dict) -> PortfolioWeights:
    if spec.kind == "equal":
        return equal_weight(snap)
    if spec.kind == "network_index":
        return network_index_weights(scores, snap.firms, snap.as_of)
    if spec.kind == "mean_variance":
        return mean_variance_weights(cov, spec.lambda_risk)
    if spec.checkpoint is not None:
        return gat_weights(gatnet.load_checkpoint(spec.checkpoint), snap, graph)
    prev: Optional[GatParams] = gat_state.get("params")
    if cfg.warm_start and prev is not None and prev.in_dim == cfg.lookback_T:
        params = prev.copy()
    else:
        params = gatnet.init_params(cfg.lookback_T, cfg.gat, cfg.seed)
    X_tr = feature_matrix(rets, snap.firms, split.train_window[0], cfg.lookback_T)
    X_va = feature_matrix(rets, snap.firms, split.val_window[0], cfg.lookback_T)
    state = TrainState(params, seed=cfg.seed + gat_state.get("split", 0))
    best = gatnet.train(state, R["train"], R["val"], X_tr, graph, X_val=X_va)
    gat_state["params"] = best
    gat_state["last_state"] = state
    return gat_weights(best, snap, graph)


def run_backtest(panel: PricePanel, strategies: Sequence[StrategySpec],
                 config: BacktestConfig = BacktestConfig()) -> BacktestReport:
    """Evaluate every strategy on each quarterly split; failures are recorded as skips."""
    rets = compute_returns(panel)
    vols = compute_volatility_series(rets, config.vol_lookback)
    splits = rolling_splits(panel.calendar, config.start, config.end, config.lookback_T)
    names = [s.name for s in strategies]
    if len(set(names)) != len(names):
        raise BacktestError("duplicate strategies")
    rows: list[dict[str, Any]] = []
    weights_out: list[dict[str, Any]] = []
    skips: list[dict[str, str]] = []
    prev_weights: dict[str, PortfolioWeights] = {}
    prev_universe: Optional[set[str]] = None
    gat_state: dict[str, Any] = {"split": 0}
    for k, split in enumerate(splits):
        reb = split.rebalance_date.strftime("%Y-%m-%d")
        try:
            snap, graph, scores, cov, R = _prepare_split(rets, vols, split, config)
        except Exception as exc:  # recorded, not fatal
            log.warning("split %s skipped: %s", reb, exc)
            skips.append({"rebalance": reb, "strategy": "*", "reason": f"{type(exc).__name__}: {exc}"})
            continue
        universe = set(snap.firms)
        entered = universe - prev_universe if prev_universe is not None else set()
        exited = prev_universe - universe if prev_universe is not None else set()
        gat_state["split"] = k
        for spec in strategies:
            try:
                w = _strategy_weights(spec, snap, graph, scores, cov, config, rets, split, R, gat_state)
            except Exception as exc:
                log.warning("split %s strategy %s skipped: %s", reb, spec.name, exc)
                skips.append({"rebalance": reb, "strategy": spec.name, "reason": f"{type(exc).__name__}: {exc}"})
                continue
            sharpes = {role: portfolio_sharpe(w, R[role]) for role in ROLES}
            prev = prev_weights.get(spec.name)
            first = prev is None or prev_universe is None
            to = Turnover(0.0, 0.0, 0.0) if first else excess_turnover(w, prev, entered, exited)
            cen = weighted_centrality(w, scores)
            flags = list(w.flags) + [f"degenerate_sharpe_{r}" for r in ROLES if sharpes[r].degenerate]
            rows.append({
                "rebalance": reb,
                "strategy": spec.name,
                "n_firms": snap.n,
                "n_holdings": int(np.count_nonzero(w.weights)),
                "sharpe_train": sharpes["train"].sharpe,
                "sharpe_val": sharpes["val"].sharpe,
                "sharpe_test": sharpes["test"].sharpe,
                "unallocated_fraction": unallocated_fraction(w),
                "weighted_betweenness": cen["betweenness"],
                "weighted_degree": cen["degree"],
                "sectors": sector_allocation(w, rets.sectors),
                "new_pct": to.new_pct,
                "closed_pct": to.closed_pct,
                "turnover_pct": to.turnover_pct,
                "first_rebalance": first,
                "flags": flags,
            })
            weights_out.append({"rebalance": reb, "strategy": spec.name,
                                "weights": {f: float(x) for f, x in zip(w.firms, w.weights) if x > 0}})
            prev_weights[spec.name] = w
        prev_universe = universe
    return BacktestReport(rows, skips, names, weights_out)


# ---------------------------------------------------------------------------
# figure tables

def figure_tables(report: BacktestReport) -> dict[str, list[list[Any]]]:
    """Plot-ready tables keyed by CSV file name; first row is the header."""
    ma = {s: a["sharpe_ma4"] for s, a in report.aggregates().items()}
    sharpe = [["rebalance", "strategy", "sharpe_train", "sharpe_val", "sharpe_test", "sharpe_test_ma4"]]
    counters: dict[str, int] = {}
    for r in report.rows:
        s = r["strategy"]
        i = counters.get(s, 0)
        counters[s] = i + 1
        m = ma[s][i - 3] if i >= 3 else None
        sharpe.append([r["rebalance"], s, r["sharpe_train"], r["sharpe_val"], r["sharpe_test"], m])
    centrality = [["rebalance", "strategy", "weighted_betweenness", "weighted_degree"]]
    sectors = [["rebalance", "strategy", "sector", "weight"]]
    turnover = [["rebalance", "strategy", "new_pct", "closed_pct", "turnover_pct", "first_rebalance"]]
    sparsity = [["rebalance", "strategy", "unallocated_fraction", "n_holdings", "n_firms"]]
    for r in report.rows:
        key = [r["rebalance"], r["strategy"]]
        centrality.append(key + [r["weighted_betweenness"], r["weighted_degree"]])
        for sec, x in r["sectors"].items():
            sectors.append(key + [sec, x])
        turnover.append(key + [r["new_pct"], r["closed_pct"], r["turnover_pct"], int(r["first_rebalance"])])
        sparsity.append(key + [r["unallocated_fraction"], r["n_holdings"], r["n_firms"]])
    return dict(zip(FIGURE_CSVS, (sharpe, centrality, sectors, turnover, sparsity)))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_figure_csvs(report: BacktestReport, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, table in figure_tables(report).items():
        p = out_dir / name
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in table:
                w.writerow([_fmt(v) for v in row])
        paths.append(p)
    return paths


def write_report(report: BacktestReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p = out_dir / "report.json"
    p.write_text(report.to_json())
    write_figure_csvs(report, out_dir)
    write_report_weights(report, out_dir / "weights.csv")
    return p


def write_report_weights(report: BacktestReport, path) -> None:
    """Held positions per rebalance as ``as_of,firm_id,weight,strategy`` (zero weights omitted)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["as_of", "firm_id", "weight", "strategy"])
        for entry in report.weights:
            for firm, x in entry["weights"].items():
                w.writerow([entry["rebalance"], firm, repr(float(x)), entry["strategy"]])
