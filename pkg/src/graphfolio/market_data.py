"""Daily price panels, return and volatility series, and the rolling universe.

Panels are stored wide: a ``DataFrame`` indexed by trading date with one
column per firm and ``NaN`` wherever the firm has no observation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

CSV_HEADER = ["date", "firm_id", "close", "sector", "default_flag"]
DEFAULT_MIN_HISTORY = 60


class PanelError(ValueError):
    """Raised for malformed price input or a panel violating its invariants."""


def _contiguous(values: np.ndarray) -> bool:
    present = ~np.isnan(values)
    idx = np.flatnonzero(present)
    if idx.size == 0:
        return True
    return idx[-1] - idx[0] + 1 == idx.size


@dataclass(frozen=True)
class PricePanel:
    prices: pd.DataFrame
    sectors: dict[str, str]
    default_dates: dict[str, Optional[pd.Timestamp]]

    def __post_init__(self):
        values = self.prices.to_numpy(dtype=float)
        if np.any(values[~np.isnan(values)] <= 0):
            raise PanelError("close prices must be positive")
        if not self.prices.index.is_monotonic_increasing or self.prices.index.has_duplicates:
            raise PanelError("trading calendar must be strictly increasing")
        for j, firm in enumerate(self.prices.columns):
            if not _contiguous(values[:, j]):
                raise PanelError(f"firm {firm}: observations are not a contiguous run")
            dd = self.default_dates.get(firm)
            if dd is not None:
                later = self.prices.index > dd
                if np.any(~np.isnan(values[later, j])):
                    raise PanelError(f"firm {firm}: observations after default date {dd.date()}")

    @property
    def calendar(self) -> pd.DatetimeIndex:
        return self.prices.index

    @property
    def firms(self) -> list[str]:
        return list(self.prices.columns)

    def equals(self, other: "PricePanel") -> bool:
        return (
            self.prices.equals(other.prices)
            and self.sectors == other.sectors
            and self.default_dates == other.default_dates
        )


@dataclass(frozen=True)
class ReturnPanel:
    returns: pd.DataFrame
    sectors: dict[str, str]
    default_dates: dict[str, Optional[pd.Timestamp]]

    @property
    def calendar(self) -> pd.DatetimeIndex:
        return self.returns.index


@dataclass(frozen=True)
class VolPanel:
    vols: pd.DataFrame
    lookback: int = 30


@dataclass(frozen=True)
class UniverseSnapshot:
    as_of: pd.Timestamp
    firms: list[str]
    lookback_T: int
    feature_matrix: np.ndarray
    window: pd.DatetimeIndex = field(repr=False)

    def __post_init__(self):
        if list(self.firms) != sorted(set(self.firms)):
            raise PanelError("snapshot firms must be sorted and unique")
        if self.feature_matrix.shape != (len(self.firms), self.lookback_T):
            raise PanelError("feature matrix shape does not match firms x lookback")

    @property
    def n(self) -> int:
        return len(self.firms)


def load_price_panel(path) -> PricePanel:
    """Parse a long-format price CSV (``date,firm_id,close,sector,default_flag``)."""
    path = Path(path)
    records: dict[tuple[pd.Timestamp, str], float] = {}
    sectors: dict[str, str] = {}
    defaults: dict[str, Optional[pd.Timestamp]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise PanelError(f"line 1: header must be {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise PanelError(f"line {lineno}: expected 5 fields, got {len(row)}")
            date_s, firm, close_s, sector, flag_s = row
            try:
                date = pd.Timestamp.fromisoformat(date_s)
            except ValueError:
                raise PanelError(f"line {lineno}: bad date {date_s!r}") from None
            try:
                close = float(close_s)
            except ValueError:
                raise PanelError(f"line {lineno}: bad close {close_s!r}") from None
            if not math.isfinite(close) or close <= 0:
                raise PanelError(f"line {lineno}: close must be positive, got {close_s}")
            if flag_s not in ("0", "1"):
                raise PanelError(f"line {lineno}: default_flag must be 0 or 1, got {flag_s!r}")
            if not firm:
                raise PanelError(f"line {lineno}: empty firm_id")
            key = (date, firm)
            if key in records:
                raise PanelError(f"line {lineno}: duplicate observation for {firm} on {date_s}")
            records[key] = close
            if sectors.setdefault(firm, sector) != sector:
                raise PanelError(f"line {lineno}: firm {firm} changes sector")
            defaults.setdefault(firm, None)
            if flag_s == "1":
                if defaults[firm] is not None:
                    raise PanelError(f"line {lineno}: firm {firm} defaults twice")
                defaults[firm] = date
    if not records:
        raise PanelError(f"{path}: no observations")
    s = pd.Series(records)
    prices = s.unstack(level=1).sort_index().sort_index(axis=1)
    prices.index = pd.DatetimeIndex(prices.index, name="date")
    prices.columns.name = "firm_id"
    prices = prices.astype(float)
    return PricePanel(prices, sectors, defaults)


def write_price_panel(panel: PricePanel, path) -> None:
    """Write ``panel`` in the long CSV schema; ``load_price_panel`` inverts it exactly."""
    values = panel.prices.to_numpy(dtype=float)
    dates = [d.strftime("%Y-%m-%d") for d in panel.calendar]
    firms = panel.firms
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i, d in enumerate(dates):
            ts = panel.calendar[i]
            for j, firm in enumerate(firms):
                v = values[i, j]
                if np.isnan(v):
                    continue
                flag = "1" if panel.default_dates.get(firm) == ts else "0"
                w.writerow([d, firm, repr(float(v)), panel.sectors[firm], flag])


def compute_returns(panel: PricePanel) -> ReturnPanel:
    """Simple daily returns; a defaulting firm gets one terminal -1 on the next trading day."""
    prices = panel.prices
    rets = prices / prices.shift(1) - 1.0
    values = rets.to_numpy(copy=True)
    cal = panel.calendar
    for j, firm in enumerate(panel.firms):
        dd = panel.default_dates.get(firm)
        if dd is None:
            continue
        pos = cal.get_loc(dd)
        if pos + 1 < len(cal):
            values[pos + 1, j] = -1.0
    out = pd.DataFrame(values, index=cal, columns=prices.columns)
    return ReturnPanel(out, dict(panel.sectors), dict(panel.default_dates))


def compute_volatility_series(returns: ReturnPanel, lookback: int = 30) -> VolPanel:
    """Population std of the trailing ``lookback`` returns; NaN during warm-up."""
    if lookback < 2:
        raise ValueError("lookback must be >= 2")
    r = returns.returns.to_numpy(dtype=float)
    out = np.full_like(r, np.nan)
    if r.shape[0] >= lookback:
        for c0 in range(0, r.shape[1], 64):
            windows = sliding_window_view(r[:, c0:c0 + 64], lookback, axis=0)
            # NaN propagates from any gap in the window
            out[lookback - 1:, c0:c0 + 64] = windows.std(axis=-1)
    vols = pd.DataFrame(out, index=returns.returns.index, columns=returns.returns.columns)
    return VolPanel(vols, lookback)


def window_before(calendar: pd.DatetimeIndex, as_of, length: int) -> pd.DatetimeIndex:
    """The ``length`` trading dates strictly before ``as_of`` (fewer at the calendar start)."""
    pos = calendar.get_loc(pd.Timestamp(as_of))
    return calendar[max(0, pos - length):pos]


def active_universe(
    returns: ReturnPanel,
    as_of,
    lookback_T: int,
    min_history: int = DEFAULT_MIN_HISTORY,
) -> UniverseSnapshot:
    """Firms active at ``as_of`` with their reversed-chronology return windows.

    A firm is active when it has a close on the prior trading day, has not
    defaulted before ``as_of``, and has at least ``min_history`` returns among
    the ``lookback_T`` trading days preceding ``as_of``. Missing older returns
    are padded with zeros.
    """
    as_of = pd.Timestamp(as_of)
    cal = returns.calendar
    if as_of not in cal:
        raise PanelError(f"{as_of.date()} is not a trading date")
    window = window_before(cal, as_of, lookback_T)
    if len(window) == 0:
        raise PanelError("empty universe: no history before as_of")
    block = returns.returns.loc[window]
    last_day = block.iloc[-1]
    counts = block.notna().sum(axis=0)
    firms = []
    for firm in sorted(block.columns):
        dd = returns.default_dates.get(firm)
        if dd is not None and dd < as_of:
            continue
        if np.isnan(last_day[firm]) or counts[firm] < min_history:
            continue
        firms.append(firm)
    if not firms:
        raise PanelError(f"empty universe at {as_of.date()}")
    return UniverseSnapshot(
        as_of, firms, lookback_T, feature_matrix(returns, firms, as_of, lookback_T), window
    )


def feature_matrix(returns: ReturnPanel, firms: list[str], as_of, lookback_T: int) -> np.ndarray:
    """Rows ``(r_{t-1}, ..., r_{t-T})`` for ``firms``; zeros where history is missing."""
    cal = returns.calendar
    window = window_before(cal, pd.Timestamp(as_of), lookback_T)
    X = np.zeros((len(firms), lookback_T))
    if len(window):
        block = returns.returns.loc[window, firms].to_numpy(dtype=float)
        block = np.nan_to_num(block[::-1].T, nan=0.0)
        X[:, : block.shape[1]] = block
    return X


def returns_matrix(returns: ReturnPanel, firms: list[str], dates: pd.DatetimeIndex) -> np.ndarray:
    """Days x firms matrix of returns over ``dates``; absent observations count as 0."""
    block = returns.returns.reindex(index=dates, columns=firms)
    return np.nan_to_num(block.to_numpy(dtype=float), nan=0.0)


# ---------------------------------------------------------------------------
# synthetic market

@dataclass(frozen=True)
class GeneratorConfig:
    """Settings for :func:`generate_synthetic_market`.

    Hazards are annual probabilities; volatilities are daily standard
    deviations. ``n_firms`` is the universe size on the first day; entries
    arrive at ``entry_hazard * n_firms`` firms per year.
    """

    n_firms: int = 100
    n_years: float = 5.0
    n_sectors: int = 8
    default_hazard: float = 0.015
    entry_hazard: float = 0.05
    exit_hazard: float = 0.03
    market_vol: float = 0.008
    sector_vol: float = 0.006
    idio_vol: float = 0.015
    drift: float = 0.0003
    alpha_scale: float = 0.03
    regime_stay_calm: float = 0.99
    regime_stay_stress: float = 0.95
    stress_multiplier: float = 2.5
    start_date: str = "2000-01-03"
    days_per_year: int = 252

    def validate(self) -> None:
        if self.n_firms < 1:
            raise ValueError("n_firms must be >= 1")
        if self.n_years <= 0:
            raise ValueError("n_years must be positive")
        if self.n_sectors < 1:
            raise ValueError("n_sectors must be >= 1")
        for name in ("default_hazard", "entry_hazard", "exit_hazard"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        for name in ("market_vol", "sector_vol", "idio_vol", "alpha_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("regime_stay_calm", "regime_stay_stress"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.stress_multiplier <= 0:
            raise ValueError("stress_multiplier must be positive")
        if self.days_per_year < 1:
            raise ValueError("days_per_year must be >= 1")
        pd.Timestamp(self.start_date)


def _daily(p_annual: float, days: int) -> float:
    return 1.0 - (1.0 - p_annual) ** (1.0 / days)


def generate_synthetic_market(config: GeneratorConfig, seed: int) -> PricePanel:
    """Sector-factor market with a two-state volatility regime, entries, exits and defaults.

    Daily return of firm ``i`` in sector ``s``::

        r = drift + alpha_i + m * (market_t + sector_{s,t} + idio_i * eps)

    where ``m`` is the regime multiplier, ``alpha_i`` a per-firm drift scaled by
    the idiosyncratic volatility, and ``idio_i`` the firm's idiosyncratic vol.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n_days = int(round(config.n_years * config.days_per_year))
    cal = pd.bdate_range(config.start_date, periods=n_days, name="date")

    # regime path
    stress = np.zeros(n_days, dtype=bool)
    u = rng.random(n_days)
    for t in range(1, n_days):
        stay = config.regime_stay_stress if stress[t - 1] else config.regime_stay_calm
        stress[t] = stress[t - 1] if u[t] < stay else not stress[t - 1]
    mult = np.where(stress, config.stress_multiplier, 1.0)
    market = rng.standard_normal(n_days) * config.market_vol * mult
    sector_f = rng.standard_normal((n_days, config.n_sectors)) * config.sector_vol * mult[:, None]

    # entry days: the initial cohort on day 0, then Poisson arrivals
    p_entry = config.entry_hazard * config.n_firms / config.days_per_year
    arrivals = rng.poisson(p_entry, size=n_days)
    arrivals[0] = 0
    entry_day = np.concatenate([np.zeros(config.n_firms, dtype=int), np.repeat(np.arange(n_days), arrivals)])
    n_total = entry_day.size

    sector_idx = rng.integers(0, config.n_sectors, size=n_total)
    idio = config.idio_vol * rng.lognormal(0.0, 0.25, size=n_total)
    alpha = config.alpha_scale * idio * rng.standard_normal(n_total)
    start_px = rng.uniform(10.0, 100.0, size=n_total)

    p_def = _daily(config.default_hazard, config.days_per_year)
    p_exit = _daily(config.exit_hazard, config.days_per_year)
    # first event day per firm (geometric waiting times from entry)
    def_wait = rng.geometric(p_def, size=n_total) if p_def > 0 else np.full(n_total, np.iinfo(np.int64).max)
    exit_wait = rng.geometric(p_exit, size=n_total) if p_exit > 0 else np.full(n_total, np.iinfo(np.int64).max)
    eps = rng.standard_normal((n_days, n_total))

    width = len(str(n_total - 1))
    firms = [f"F{k:0{width}d}" for k in range(n_total)]
    prices = np.full((n_days, n_total), np.nan)
    defaults: dict[str, Optional[pd.Timestamp]] = {}
    for k in range(n_total):
        start = entry_day[k]
        d_day = start + def_wait[k] if def_wait[k] < n_days else n_days + 1
        x_day = start + exit_wait[k] if exit_wait[k] < n_days else n_days + 1
        last = min(n_days - 1, d_day, x_day - 1)
        r = (
            config.drift
            + alpha[k]
            + market[start + 1:last + 1]
            + sector_f[start + 1:last + 1, sector_idx[k]]
            + idio[k] * mult[start + 1:last + 1] * eps[start + 1:last + 1, k]
        )
        r = np.maximum(r, -0.95)
        path = start_px[k] * np.concatenate([[1.0], np.cumprod(1.0 + r)])
        prices[start:last + 1, k] = path
        defaults[firms[k]] = cal[last] if d_day <= x_day - 1 and d_day <= n_days - 1 else None

    df = pd.DataFrame(prices, index=cal, columns=pd.Index(firms, name="firm_id"))
    sectors = {f: f"S{sector_idx[k]:02d}" for k, f in enumerate(firms)}
    return PricePanel(df, sectors, defaults)


def realized_default_rate(panel: PricePanel) -> float:
    """Defaults per firm-year of exposure (trading days / days_per_year=252)."""
    exposure_days = int(panel.prices.notna().to_numpy().sum())
    n_defaults = sum(1 for d in panel.default_dates.values() if d is not None)
    if exposure_days == 0:
        return 0.0
    return n_defaults / (exposure_days / 252.0)


def yearly_default_rates(panel: PricePanel) -> pd.Series:
    """Defaults in each calendar year over firms active in that year."""
    active = panel.prices.notna().groupby(panel.calendar.year).any()
    n_active = active.sum(axis=1)
    years = pd.Series(0, index=n_active.index)
    for d in panel.default_dates.values():
        if d is not None:
            years[d.year] += 1
    return years / n_active
