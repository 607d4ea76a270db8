"""Run configuration: flat ``key = value`` files merged with command-line overrides."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

from .backtest import BacktestConfig
from .gatnet import GatConfig
from .market_data import GeneratorConfig


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _opt_int(text) -> Optional[int]:
    if text is None or str(text).strip().lower() in ("", "none", "auto"):
        return None
    return int(text)


def _opt_str(text) -> Optional[str]:
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return str(text)


@dataclass
class RunConfig:
    """Pipeline, model and output settings shared by the CLI commands.

    Defaults: 30-day volatility lookback, 3-year (756 trading day) rolling
    window, 8 attention heads of width 24 and an early-stopping patience of
    15 epochs.
    """

    prices: Optional[str] = None
    out_dir: str = "out"
    as_of: Optional[str] = None
    start: Optional[str] = None
    end: Optional[str] = None
    strategies: str = "equal,network,mv,gat"
    lookback_T: int = 756
    vol_lookback: int = 30
    min_history: int = 60
    min_overlap: int = 60
    tmfg: bool = True
    heads: int = 8
    out_dim: int = 24
    hidden: int = 64
    dropout: float = 0.2
    l1: float = 1e-4
    lr: float = 1e-3
    patience: int = 15
    max_epochs: int = 200
    lambda_risk: float = 1.0
    warm_start: bool = True
    seed: int = 0
    threads: Optional[int] = None
    figures: bool = True

    def gat_config(self) -> GatConfig:
        return GatConfig(heads=self.heads, out_dim=self.out_dim, hidden=self.hidden,
                         dropout=self.dropout, l1=self.l1, lr=self.lr,
                         patience=self.patience, max_epochs=self.max_epochs)

    def backtest_config(self) -> BacktestConfig:
        return BacktestConfig(
            lookback_T=self.lookback_T, vol_lookback=self.vol_lookback, min_history=self.min_history,
            min_overlap=self.min_overlap, use_tmfg=self.tmfg, lambda_risk=self.lambda_risk,
            gat=self.gat_config(), seed=self.seed, warm_start=self.warm_start, threads=self.threads,
            start=self.start, end=self.end,
        )

    def validate(self) -> None:
        for name in ("lookback_T", "min_history", "min_overlap", "heads", "out_dim", "hidden",
                     "patience", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vol_lookback < 2:
            raise ConfigError("vol_lookback must be >= 2")
        if self.lambda_risk <= 0:
            raise ConfigError("lambda_risk must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            self.gat_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


RUN_HELP = {
    "prices": "input price CSV (date,firm_id,close,sector,default_flag)",
    "out_dir": "output directory",
    "as_of": "graph date (default: last trading date)",
    "start": "first rebalance date to include",
    "end": "last rebalance date to include",
    "strategies": "comma list of equal,network,mv,gat",
    "lookback_T": "rolling window / feature length in trading days (3 years)",
    "vol_lookback": "days in each return-volatility window",
    "min_history": "returns required in the window for a firm to enter the universe",
    "min_overlap": "common days required for a dependency edge",
    "tmfg": "filter the dependency graph with TMFG (false: keep all positive edges)",
    "heads": "attention heads",
    "out_dim": "output width per attention head",
    "hidden": "width of the first dense layer",
    "dropout": "dropout rate after the first dense layer",
    "l1": "L1 coefficient on the last dense layer",
    "lr": "Adam learning rate",
    "patience": "early-stopping patience in epochs",
    "max_epochs": "epoch cap per training window",
    "lambda_risk": "mean-variance risk aversion",
    "warm_start": "start each split's training from the previous split's model",
    "seed": "random seed",
    "threads": "worker threads (fallback: $GRAPHFOLIO_THREADS)",
    "figures": "render PNG figures next to the CSVs",
}

GENERATOR_KEYS = {f.name: f for f in fields(GeneratorConfig)}


def _convert(cls, name: str, raw: Any):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    try:
        if ftype in ("bool",):
            return _bool(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "Optional[int]":
            return _opt_int(raw)
        if ftype == "Optional[str]":
            return _opt_str(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from None


def read_kv_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def build(cls, file_values: dict[str, str], overrides: dict[str, Any]):
    """Instantiate ``cls`` from config-file strings, then CLI overrides on top."""
    names = {f.name for f in fields(cls)}
    kwargs: dict[str, Any] = {}
    for k, v in file_values.items():
        if k not in names:
            raise ConfigError(f"unknown config key {k!r}")
        kwargs[k] = _convert(cls, k, v)
    for k, v in overrides.items():
        if v is not None:
            kwargs[k] = _convert(cls, k, v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def dump_kv(obj) -> str:
    lines = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name} = {'' if v is None else v}")
    return "\n".join(lines) + "\n"
