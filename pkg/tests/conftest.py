import numpy as np
import pandas as pd
import pytest

from graphfolio.market_data import PricePanel


def make_panel(closes: dict, sectors=None, defaults=None, start="2020-01-01", pad="start") -> PricePanel:
    """Wide panel from per-firm close lists. Shorter lists are padded with NaN at
    the start (late entrants) or, with ``pad="end"``, at the end (early leavers).
    ``defaults`` maps firm to the calendar position of its default date."""
    n = max(len(v) for v in closes.values())
    cal = pd.bdate_range(start, periods=n, name="date")
    cols = {}
    for f, v in closes.items():
        col = np.full(n, np.nan)
        if pad == "start":
            col[n - len(v):] = v
        else:
            col[:len(v)] = v
        cols[f] = col
    df = pd.DataFrame(cols, index=cal)
    df.columns.name = "firm_id"
    sectors = sectors or {f: "A" for f in closes}
    dd = {f: None for f in closes}
    for f, pos in (defaults or {}).items():
        dd[f] = cal[pos]
    return PricePanel(df, sectors, dd)


def panel_from_returns(R: np.ndarray, start="2020-01-01", sectors=None) -> PricePanel:
    """Compounds a days x firms return matrix into a panel starting at 100."""
    px = 100.0 * np.vstack([np.ones(R.shape[1]), np.cumprod(1.0 + R, axis=0)])
    firms = [f"F{j:03d}" for j in range(R.shape[1])]
    return make_panel({f: px[:, j] for j, f in enumerate(firms)}, sectors=sectors, start=start)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    # criterion number -> (status, title, detail), filled by test_acceptance.py
    config.acceptance_results = {}


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        status, title, detail = results[num]
        terminalreporter.write_line(f"criterion {num:>2} {status}: {title} ({detail})")
