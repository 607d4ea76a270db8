"""Command-line entry point: ``graphfolio {generate,graph,backtest,report}``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 pipeline error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import pandas as pd

from . import config as cfgmod
from .backtest import BacktestReport, run_backtest, write_figure_csvs, write_report
from .config import ConfigError, RunConfig
from .dependency import pairwise_dependency_matrix, resolve_workers, write_dependency_csv
from .market_data import (
    GeneratorConfig,
    PanelError,
    active_universe,
    compute_returns,
    compute_volatility_series,
    generate_synthetic_market,
    load_price_panel,
    realized_default_rate,
    write_price_panel,
)
from .netfilter import dense_graph, peripherality_scores, tmfg, write_centrality, write_edge_list, write_insertion_log
from .strategies import StrategySpec

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PIPELINE = 0, 2, 3, 4

log = logging.getLogger("graphfolio")


class DataError(RuntimeError):
    pass


GENERATOR_FLAGS = {
    "firms": "n_firms",
    "years": "n_years",
    "sectors": "n_sectors",
}


def _add_run_knobs(p: argparse.ArgumentParser, names) -> None:
    defaults = RunConfig()
    for name in names:
        default = getattr(defaults, name)
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, default=None, metavar=name.upper(),
                       help=f"{cfgmod.RUN_HELP[name]} (default: {default})")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphfolio", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic price CSV")
    g.add_argument("--config", help="key = value file with generator settings")
    g.add_argument("--out", default="prices.csv", help="output CSV path (default: prices.csv)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    gen_defaults = GeneratorConfig()
    short = {v: k for k, v in GENERATOR_FLAGS.items()}
    for f in fields(GeneratorConfig):
        flag = "--" + short.get(f.name, f.name).replace("_", "-")
        g.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(),
                       help=f"{f.name} (default: {getattr(gen_defaults, f.name)})")

    gr = sub.add_parser("graph", help="dependency matrix, TMFG edges and centralities at one date")
    gr.add_argument("--config", help="key = value run config")
    _add_run_knobs(gr, ["prices", "out_dir", "as_of", "lookback_T", "vol_lookback", "min_history",
                        "min_overlap", "tmfg", "threads"])

    bt = sub.add_parser("backtest", help="rolling-window backtest with report and figures")
    bt.add_argument("--config", help="key = value run config")
    _add_run_knobs(bt, [f.name for f in fields(RunConfig) if f.name != "as_of"])

    rp = sub.add_parser("report", help="re-render figure CSVs and PNGs from report.json")
    rp.add_argument("--report", required=True, help="path to report.json")
    rp.add_argument("--out-dir", dest="out_dir", default=None, help="output directory (default: the report's)")
    rp.add_argument("--figures", default="true", help="render PNG figures (default: true)")
    return ap


def _run_config(args) -> RunConfig:
    file_values = cfgmod.read_kv_file(args.config) if getattr(args, "config", None) else {}
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    rc = cfgmod.build(RunConfig, file_values, overrides)
    rc.validate()
    if rc.threads is None:
        rc.threads = resolve_workers(None)
    return rc


def _echo(rc, out_dir: Path, name: str = "effective_config.txt") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(cfgmod.dump_kv(rc))


def _load(rc: RunConfig):
    if not rc.prices:
        raise ConfigError("--prices is required")
    if not Path(rc.prices).exists():
        raise ConfigError(f"price file not found: {rc.prices}")
    try:
        return load_price_panel(rc.prices)
    except PanelError as exc:
        raise DataError(str(exc)) from None


def cmd_generate(args) -> int:
    file_values = cfgmod.read_kv_file(args.config) if args.config else {}
    overrides = {f.name: getattr(args, f.name) for f in fields(GeneratorConfig)}
    gc = cfgmod.build(GeneratorConfig, file_values, overrides)
    try:
        gc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    panel = generate_synthetic_market(gc, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_price_panel(panel, out)
    n_def = sum(d is not None for d in panel.default_dates.values())
    print(f"wrote {out}: firms={len(panel.firms)} years={gc.n_years:g} days={len(panel.calendar)} "
          f"defaults={n_def} realized_default_rate={realized_default_rate(panel):.4%}")
    return EXIT_OK


def cmd_graph(args) -> int:
    rc = _run_config(args)
    panel = _load(rc)
    rets = compute_returns(panel)
    as_of = pd.Timestamp(rc.as_of) if rc.as_of else panel.calendar[-1]
    if as_of not in panel.calendar:
        raise DataError(f"as-of date {as_of.date()} is not a trading date")
    try:
        snap = active_universe(rets, as_of, rc.lookback_T, rc.min_history)
    except PanelError as exc:
        raise DataError(str(exc)) from None
    if snap.n < 4:
        raise DataError(f"universe at {as_of.date()} has {snap.n} firms; need at least 4")
    vols = compute_volatility_series(rets, rc.vol_lookback)
    dep = pairwise_dependency_matrix(vols, snap, rc.min_overlap, rc.threads)
    g = tmfg(dep) if rc.tmfg else dense_graph(dep)
    scores = peripherality_scores(g)
    out = Path(rc.out_dir)
    _echo(rc, out)
    write_dependency_csv(dep, out / "dependency.csv")
    write_edge_list(g, out / "edges.csv")
    write_insertion_log(g, out / "insertion_log.csv")
    write_centrality(g, scores, out / "centrality.csv")
    print(f"as_of={as_of.date()} firms={snap.n} edges={len(g.edges)} -> {out}")
    return EXIT_OK


def cmd_backtest(args) -> int:
    rc = _run_config(args)
    try:
        specs = StrategySpec.parse_list(rc.strategies, rc.lambda_risk)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    panel = _load(rc)
    out = Path(rc.out_dir)
    _echo(rc, out)
    report = run_backtest(panel, specs, rc.backtest_config())
    write_report(report, out)
    if rc.figures:
        from .plotting import render_figures
        render_figures(report, out)
    n_reb = len({r["rebalance"] for r in report.rows})
    print(f"rebalances={n_reb} rows={len(report.rows)} skips={len(report.skips)} -> {out / 'report.json'}")
    for s in report.skips:
        print(f"skipped {s['rebalance']} {s['strategy']}: {s['reason']}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.report)
    if not path.exists():
        raise ConfigError(f"report not found: {path}")
    report = BacktestReport.from_json(path.read_text())
    out = Path(args.out_dir) if args.out_dir else path.parent
    write_figure_csvs(report, out)
    if cfgmod._bool(args.figures):
        from .plotting import render_figures
        render_figures(report, out)
    print(f"rendered figures for {len(report.rows)} rows -> {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "graph": cmd_graph, "backtest": cmd_backtest, "report": cmd_report}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # anything else is a pipeline failure
        log.debug("pipeline failure", exc_info=True)
        print(f"pipeline error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
