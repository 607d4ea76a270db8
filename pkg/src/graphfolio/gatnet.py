"""Graph-attention allocation model with hand-written reverse-mode gradients.

Pipeline for one graph::

    X --(K attention heads, ReLU, concat)--> H
      --batch norm--> dense(d1) --ReLU--> dropout --> dense(1) --ReLU--> s2
      --normalize--> w

Trained by Adam on the negative log Sharpe ratio of the portfolio ``R @ w``
plus an L1 penalty on the last dense layer.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .netfilter import FilteredGraph

log = logging.getLogger(__name__)

PARAM_NAMES = ("W", "a", "W1", "b1", "W2", "b2")
CHECKPOINT_MAGIC = b"GATNET1"
ALLOC_EPS = 1e-12


class GatError(RuntimeError):
    pass


class TrainingDiverged(GatError):
    def __init__(self, epoch: int, what: str):
        super().__init__(f"training diverged at epoch {epoch}: {what}")
        self.epoch = epoch


@dataclass(frozen=True)
class GatConfig:
    heads: int = 8
    out_dim: int = 24
    hidden: int = 64
    dropout: float = 0.2
    l1: float = 1e-4
    leaky_slope: float = 0.2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 15
    max_epochs: int = 200
    # daily Sharpe below which the log loss is continued linearly (covers mu <= 0)
    sr_floor: float = 1e-3

    def __post_init__(self):
        if self.heads < 1 or self.out_dim < 1 or self.hidden < 1:
            raise ValueError("heads, out_dim and hidden must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.l1 < 0 or self.lr < 0:
            raise ValueError("l1 and lr must be non-negative")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")
        if self.sr_floor <= 0:
            raise ValueError("sr_floor must be positive")


@dataclass
class GatParams:
    config: GatConfig
    in_dim: int
    tensors: dict[str, np.ndarray]
    running_mean: np.ndarray
    running_var: np.ndarray

    def __post_init__(self):
        K, Tp, T, d1 = self.config.heads, self.config.out_dim, self.in_dim, self.config.hidden
        expected = {"W": (K, Tp, T), "a": (K, 2 * Tp), "W1": (d1, K * Tp), "b1": (d1,),
                    "W2": (d1,), "b2": (1,)}
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise GatError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")
        if self.running_mean.shape != (K * Tp,) or self.running_var.shape != (K * Tp,):
            raise GatError("normalization statistics have the wrong shape")

    @property
    def embed_dim(self) -> int:
        return self.config.heads * self.config.out_dim

    def copy(self) -> "GatParams":
        return copy.deepcopy(self)

    def assert_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise GatError(f"parameter {name} is not finite")


def init_params(in_dim: int, config: GatConfig = GatConfig(), seed: int = 0) -> GatParams:
    """Glorot-uniform weights, zero hidden bias, unit output bias (every node starts
    with a positive score), identity normalization statistics."""
    rng = np.random.default_rng(seed)
    K, Tp, d1 = config.heads, config.out_dim, config.hidden

    def glorot(shape, fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    tensors = {
        "W": glorot((K, Tp, in_dim), in_dim, Tp),
        "a": glorot((K, 2 * Tp), 2 * Tp, 1),
        "W1": glorot((d1, K * Tp), K * Tp, d1),
        "b1": np.zeros(d1),
        "W2": glorot((d1,), d1, 1),
        "b2": np.ones(1),
    }
    return GatParams(config, in_dim, tensors, np.zeros(K * Tp), np.ones(K * Tp))


@dataclass(frozen=True)
class PortfolioWeights:
    as_of: Optional[pd.Timestamp]
    firms: list[str]
    weights: np.ndarray
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        w = self.weights
        if w.shape != (len(self.firms),):
            raise ValueError("weights length does not match firms")
        if not np.all(np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
            raise ValueError("weights must lie in [0, 1]")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.firms, self.weights.tolist()))


# ---------------------------------------------------------------------------
# forward pieces

def attention_mask(g: FilteredGraph) -> np.ndarray:
    """Adjacency with self-loops: each node attends to its neighbours and itself."""
    A = g.adjacency()
    np.fill_diagonal(A, True)
    return A


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def _head_forward(W, a, X, mask, slope):
    Tp = W.shape[0]
    Z = X @ W.T
    src = Z @ a[:Tp]
    dst = Z @ a[Tp:]
    S = src[:, None] + dst[None, :]
    E = _leaky(S, slope)
    E = np.where(mask, E, -np.inf)
    E = E - E.max(axis=1, keepdims=True)
    P = np.exp(E)
    alpha = P / P.sum(axis=1, keepdims=True)
    agg = alpha @ Z
    return Z, S, alpha, agg


def _check_inputs(params: GatParams, X: np.ndarray, mask: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise GatError(f"feature matrix has shape {X.shape}, expected (n, {params.in_dim})")
    if mask.shape != (X.shape[0], X.shape[0]):
        raise GatError(f"graph has {mask.shape[0]} nodes but features have {X.shape[0]} rows")


def attention_coefficients(params: GatParams, head: int, X: np.ndarray, g: FilteredGraph) -> np.ndarray:
    """Dense ``n x n`` matrix of attention weights for ``head``; row ``u`` is
    supported on ``u`` and its neighbours and sums to 1."""
    mask = attention_mask(g)
    _check_inputs(params, X, mask)
    t = params.tensors
    _, _, alpha, _ = _head_forward(t["W"][head], t["a"][head], X, mask, params.config.leaky_slope)
    return alpha


def _gat(params: GatParams, X: np.ndarray, mask: np.ndarray):
    t = params.tensors
    heads = [_head_forward(t["W"][k], t["a"][k], X, mask, params.config.leaky_slope)
             for k in range(params.config.heads)]
    H = np.concatenate([np.maximum(h[3], 0.0) for h in heads], axis=1)
    if not np.all(np.isfinite(H)):
        raise GatError("non-finite attention-layer activations")
    return H, heads


def gat_forward(params: GatParams, X: np.ndarray, g: FilteredGraph, mode: str = "infer") -> np.ndarray:
    """Concatenated head outputs, shape ``(n, heads * out_dim)``."""
    _check_mode(mode)
    mask = attention_mask(g)
    _check_inputs(params, X, mask)
    return _gat(params, X, mask)[0]


def _check_mode(mode: str) -> None:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def dropout_mask(rng: np.random.Generator, n: int, config: GatConfig) -> np.ndarray:
    if config.dropout == 0:
        return np.ones((n, config.hidden))
    keep = rng.random((n, config.hidden)) >= config.dropout
    return keep / (1.0 - config.dropout)


def _dense(params: GatParams, H: np.ndarray, mode: str, drop: Optional[np.ndarray]):
    cfg = params.config
    t = params.tensors
    if mode == "train":
        mean = H.mean(axis=0)
        var = H.var(axis=0)
    else:
        mean, var = params.running_mean, params.running_var
    inv = 1.0 / np.sqrt(var + cfg.bn_eps)
    Hn = (H - mean) * inv
    U1 = Hn @ t["W1"].T + t["b1"]
    S1 = np.maximum(U1, 0.0)
    D = S1 * drop if (mode == "train" and drop is not None) else S1
    U2 = D @ t["W2"] + t["b2"][0]
    s2 = np.maximum(U2, 0.0)
    return s2, dict(mean=mean, var=var, inv=inv, Hn=Hn, U1=U1, D=D, U2=U2, drop=drop)


def dense_blocks_forward(params: GatParams, H: np.ndarray, mode: str = "infer",
                         drop: Optional[np.ndarray] = None) -> np.ndarray:
    """Non-negative scores ``s2`` per node. In train mode normalization uses the
    batch statistics over nodes and ``drop`` (an inverted-dropout mask) is applied."""
    _check_mode(mode)
    if not np.all(np.isfinite(H)):
        raise GatError("non-finite embedding")
    return _dense(params, H, mode, drop)[0]


def allocation_layer(s2: np.ndarray, firms: Optional[list[str]] = None, as_of=None) -> PortfolioWeights:
    """``w = s2 / sum(s2)``; equal weights (flagged) when the scores sum below 1e-12."""
    s2 = np.asarray(s2, dtype=float)
    if np.any(s2 < 0):
        raise GatError("allocation scores must be non-negative")
    firms = firms if firms is not None else [str(k) for k in range(s2.size)]
    total = s2.sum()
    if total < ALLOC_EPS:
        return PortfolioWeights(as_of, list(firms), np.full(s2.size, 1.0 / s2.size), ("degenerate_scores",))
    return PortfolioWeights(as_of, list(firms), s2 / total)


# ---------------------------------------------------------------------------
# loss

@dataclass(frozen=True)
class LossInfo:
    loss: float
    mu: float
    sigma: float
    surrogate: bool


def _sharpe_terms(w: np.ndarray, R: np.ndarray, sr_floor: float):
    if R.shape[0] < 2:
        raise GatError("loss window needs at least 2 days")
    rp = R @ w
    mu = rp.mean()
    sigma = rp.std()
    if sigma == 0:
        raise GatError("portfolio returns have zero dispersion")
    sr = mu / sigma
    if sr > sr_floor:
        loss = -math.log(mu) + math.log(sigma)
        dmu, dsig = -1.0 / mu, 1.0 / sigma
        surrogate = False
    else:
        # linear continuation of -ln(SR) below sr_floor: value and slope match at the floor
        loss = -math.log(sr_floor) + 1.0 - sr / sr_floor
        dmu = -1.0 / (sr_floor * sigma)
        dsig = mu / (sr_floor * sigma * sigma)
        surrogate = True
    n_days = R.shape[0]
    drp = dmu / n_days + dsig * (rp - mu) / (n_days * sigma)
    return loss, mu, sigma, surrogate, R.T @ drp


def sharpe_loss(w, window_returns: np.ndarray, l1: float = 0.0, W2: Optional[np.ndarray] = None,
                sr_floor: float = GatConfig.sr_floor) -> LossInfo:
    """``-ln(mu_p) + ln(sigma_p) + l1 * |W2|_1`` for daily portfolio returns ``R @ w``.

    Population moments. Below a daily Sharpe of ``sr_floor`` (always when
    ``mu_p <= 0``) the log term is replaced by its tangent line in the Sharpe
    ratio, ``1 - ln(floor) - SR / floor``, and ``surrogate`` is set.
    """
    w = w.weights if isinstance(w, PortfolioWeights) else np.asarray(w, dtype=float)
    loss, mu, sigma, surrogate, _ = _sharpe_terms(w, np.asarray(window_returns, dtype=float), sr_floor)
    if W2 is not None and l1:
        loss += l1 * float(np.abs(W2).sum())
    return LossInfo(loss, mu, sigma, surrogate)


# ---------------------------------------------------------------------------
# backward

@dataclass
class Pass:
    loss: float
    info: LossInfo
    weights: np.ndarray
    grads: dict[str, np.ndarray]
    batch_mean: np.ndarray
    batch_var: np.ndarray
    degenerate: bool


def loss_and_grad(params: GatParams, X: np.ndarray, mask: np.ndarray, R: np.ndarray,
                  mode: str = "train", drop: Optional[np.ndarray] = None,
                  need_grad: bool = True) -> Pass:
    """Forward pass and exact gradients of the training loss w.r.t. every tensor."""
    _check_mode(mode)
    _check_inputs(params, X, mask)
    cfg = params.config
    t = params.tensors
    H, heads = _gat(params, X, mask)
    s2, c = _dense(params, H, mode, drop)
    if not np.all(np.isfinite(s2)):
        raise GatError("non-finite scores")
    total = s2.sum()
    degenerate = total < ALLOC_EPS
    w = np.full(s2.size, 1.0 / s2.size) if degenerate else s2 / total
    loss, mu, sigma, surrogate, dw = _sharpe_terms(w, R, cfg.sr_floor)
    loss += cfg.l1 * float(np.abs(t["W2"]).sum())
    info = LossInfo(loss, mu, sigma, surrogate)
    if not need_grad:
        return Pass(loss, info, w, {}, c["mean"], c["var"], degenerate)

    g: dict[str, np.ndarray] = {}
    ds = np.zeros_like(s2) if degenerate else (dw - dw @ w) / total
    dU2 = ds * (c["U2"] > 0)
    g["W2"] = c["D"].T @ dU2 + cfg.l1 * np.sign(t["W2"])
    g["b2"] = np.array([dU2.sum()])
    dD = np.outer(dU2, t["W2"])
    dS1 = dD * c["drop"] if (mode == "train" and c["drop"] is not None) else dD
    dU1 = dS1 * (c["U1"] > 0)
    g["W1"] = dU1.T @ c["Hn"]
    g["b1"] = dU1.sum(axis=0)
    dHn = dU1 @ t["W1"]
    if mode == "train":
        Hn = c["Hn"]
        dH = c["inv"] * (dHn - dHn.mean(axis=0) - Hn * (dHn * Hn).mean(axis=0))
    else:
        dH = dHn * c["inv"]

    Tp = cfg.out_dim
    gW = np.zeros_like(t["W"])
    ga = np.zeros_like(t["a"])
    for k, (Z, S, alpha, agg) in enumerate(heads):
        a = t["a"][k]
        dagg = dH[:, k * Tp:(k + 1) * Tp] * (agg > 0)
        dalpha = dagg @ Z.T
        dZ = alpha.T @ dagg
        dE = alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True))
        dS = np.where(S > 0, dE, cfg.leaky_slope * dE)  # alpha is 0 off-mask, so dE is too
        dsrc = dS.sum(axis=1)
        ddst = dS.sum(axis=0)
        ga[k, :Tp] = Z.T @ dsrc
        ga[k, Tp:] = Z.T @ ddst
        dZ += np.outer(dsrc, a[:Tp]) + np.outer(ddst, a[Tp:])
        gW[k] = dZ.T @ X
    g["W"] = gW
    g["a"] = ga
    for name, arr in g.items():
        if not np.all(np.isfinite(arr)):
            raise GatError(f"non-finite gradient for parameter {name}")
    return Pass(loss, info, w, g, c["mean"], c["var"], degenerate)


def backward(params: GatParams, X: np.ndarray, g: FilteredGraph, window_returns: np.ndarray,
             mode: str = "train", drop: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
    """Gradient of the training loss for every parameter tensor (keyed by name)."""
    return loss_and_grad(params, X, attention_mask(g), np.asarray(window_returns, float), mode, drop).grads


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainState:
    params: GatParams
    seed: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = 0
    patience_counter: int = 0
    train_history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    surrogate_epochs: int = 0

    def __post_init__(self):
        for name in PARAM_NAMES:
            self.m.setdefault(name, np.zeros_like(self.params.tensors[name]))
            self.v.setdefault(name, np.zeros_like(self.params.tensors[name]))


def _adam_step(state: TrainState, grads: dict[str, np.ndarray]) -> None:
    cfg = state.params.config
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in PARAM_NAMES:
        gr = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * gr
        state.v[name] = b2 * state.v[name] + (1 - b2) * gr * gr
        state.params.tensors[name] = state.params.tensors[name] - cfg.lr * (state.m[name] / c1) / (
            np.sqrt(state.v[name] / c2) + cfg.adam_eps)


def validation_loss(params: GatParams, X: np.ndarray, g: FilteredGraph, R: np.ndarray) -> float:
    return loss_and_grad(params, X, attention_mask(g), R, mode="infer", need_grad=False).loss


def train(state: TrainState, train_returns: np.ndarray, val_returns: np.ndarray,
          X: np.ndarray, g: FilteredGraph, X_val: Optional[np.ndarray] = None) -> GatParams:
    """Adam epochs (one full-graph step each) with early stopping on the validation loss.

    Stops after ``patience`` epochs without improvement or at ``max_epochs`` and
    returns a copy of the best-validation parameters. ``state`` is updated in place.
    """
    cfg = state.params.config
    X_val = X if X_val is None else X_val
    mask = attention_mask(g)
    R_tr = np.asarray(train_returns, dtype=float)
    R_va = np.asarray(val_returns, dtype=float)
    rng = np.random.default_rng(state.seed)
    best = state.params.copy()
    while state.epoch < cfg.max_epochs:
        state.epoch += 1
        drop = dropout_mask(rng, X.shape[0], cfg)
        try:
            p = loss_and_grad(state.params, X, mask, R_tr, mode="train", drop=drop)
        except GatError as exc:
            raise TrainingDiverged(state.epoch, str(exc)) from None
        if not math.isfinite(p.loss):
            raise TrainingDiverged(state.epoch, "training loss is not finite")
        state.surrogate_epochs += p.info.surrogate
        _adam_step(state, p.grads)
        mom = cfg.bn_momentum
        state.params.running_mean = mom * state.params.running_mean + (1 - mom) * p.batch_mean
        state.params.running_var = mom * state.params.running_var + (1 - mom) * p.batch_var
        try:
            state.params.assert_finite()
        except GatError as exc:
            raise TrainingDiverged(state.epoch, str(exc)) from None
        val = validation_loss(state.params, X_val, g, R_va)
        if not math.isfinite(val):
            raise TrainingDiverged(state.epoch, "validation loss is not finite")
        state.train_history.append(p.loss)
        state.val_history.append(val)
        if val < state.best_val:
            state.best_val = val
            state.best_epoch = state.epoch
            state.patience_counter = 0
            best = state.params.copy()
        else:
            state.patience_counter += 1
            if state.patience_counter >= cfg.patience:
                log.debug("early stop at epoch %d (best %d)", state.epoch, state.best_epoch)
                break
    return best


def predict_weights(params: GatParams, X: np.ndarray, g: FilteredGraph, as_of=None) -> PortfolioWeights:
    """Inference-mode forward pass through the allocation layer."""
    H = gat_forward(params, X, g, "infer")
    s2 = dense_blocks_forward(params, H, "infer")
    return allocation_layer(s2, list(g.firms), as_of)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: GatParams, path) -> None:
    """``GATNET1`` magic line, one JSON header line, then little-endian float64 payload."""
    arrays = [(name, params.tensors[name]) for name in PARAM_NAMES]
    arrays += [("running_mean", params.running_mean), ("running_var", params.running_var)]
    header = {
        "config": asdict(params.config),
        "in_dim": params.in_dim,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> GatParams:
    with Path(path).open("rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise GatError(f"{path}: not a GATNET1 checkpoint")
        header = json.loads(fh.readline())
        payload = fh.read()
    arrays = {}
    off = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape)
        arrays[name] = arr.astype(float)
        off += 8 * count
    if off != len(payload):
        raise GatError(f"{path}: payload size does not match header")
    config = GatConfig(**header["config"])
    tensors = {name: arrays[name] for name in PARAM_NAMES}
    return GatParams(config, int(header["in_dim"]), tensors, arrays["running_mean"], arrays["running_var"])
