"""Matplotlib renderings of the backtest figure tables."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .backtest import BacktestReport, figure_tables  # noqa: E402

STYLE = {
    "figure.figsize": (8, 4.5),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _frame(table) -> pd.DataFrame:
    df = pd.DataFrame(table[1:], columns=table[0])
    df["rebalance"] = pd.to_datetime(df["rebalance"])
    return df


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sharpe(df: pd.DataFrame, path: Path) -> Path:
    fig, ax = plt.subplots()
    for s, grp in df.groupby("strategy", sort=False):
        line, = ax.plot(grp["rebalance"], grp["sharpe_test"].astype(float), marker="o", ms=3, lw=1, label=s)
        ma = grp["sharpe_test_ma4"].astype(float)
        ax.plot(grp["rebalance"], ma, color=line.get_color(), lw=2, alpha=0.6)
    ax.axhline(0, color="k", lw=0.5)
    ax.set_ylabel("annualized Sharpe (test quarter)")
    ax.legend()
    return _save(fig, path)


def plot_centrality(df: pd.DataFrame, path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, sharex=True)
    for s, grp in df.groupby("strategy", sort=False):
        axes[0].plot(grp["rebalance"], grp["weighted_betweenness"], lw=1, label=s)
        axes[1].plot(grp["rebalance"], grp["weighted_degree"], lw=1, label=s)
    axes[0].set_title("weighted betweenness")
    axes[1].set_title("weighted degree")
    axes[1].legend()
    fig.autofmt_xdate()
    return _save(fig, path)


def plot_sectors(df: pd.DataFrame, path: Path) -> Path:
    mean = df.groupby(["strategy", "sector"], sort=True)["weight"].mean().unstack(fill_value=0.0)
    fig, ax = plt.subplots()
    bottom = None
    for sector in mean.columns:
        ax.bar(mean.index, mean[sector], bottom=bottom, label=sector)
        bottom = mean[sector] if bottom is None else bottom + mean[sector]
    ax.set_ylabel("mean sector weight")
    ax.legend(ncol=2, fontsize=7, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    return _save(fig, path)


def plot_turnover(df: pd.DataFrame, path: Path) -> Path:
    later = df[df["first_rebalance"] == 0]
    mean = later.groupby("strategy", sort=False)[["new_pct", "closed_pct"]].mean()
    fig, ax = plt.subplots()
    ax.bar(mean.index, mean["new_pct"], label="new")
    ax.bar(mean.index, mean["closed_pct"], bottom=mean["new_pct"], label="closed")
    ax.axhline(0, color="k", lw=0.5)
    ax.set_ylabel("excess turnover (%)")
    ax.legend()
    return _save(fig, path)


def plot_sparsity(df: pd.DataFrame, path: Path) -> Path:
    fig, ax = plt.subplots()
    for s, grp in df.groupby("strategy", sort=False):
        ax.plot(grp["rebalance"], grp["unallocated_fraction"], marker="o", ms=3, lw=1, label=s)
    ax.set_ylim(-0.02, 1.02)
    ax.set_ylabel("fraction of firms with no allocation")
    ax.legend()
    return _save(fig, path)


PLOTTERS = {
    "sharpe_over_time.csv": plot_sharpe,
    "centrality.csv": plot_centrality,
    "sectors.csv": plot_sectors,
    "turnover.csv": plot_turnover,
    "sparsity.csv": plot_sparsity,
}


def render_figures(report: BacktestReport, out_dir) -> list[Path]:
    """One PNG per figure table, named after its CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with plt.rc_context(STYLE):
        for name, table in figure_tables(report).items():
            if len(table) < 2:
                continue
            paths.append(PLOTTERS[name](_frame(table), out_dir / name.replace(".csv", ".png")))
    return paths
