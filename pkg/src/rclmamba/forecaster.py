"""Stacked selective-scan forecaster with parameter transfer.

Architecture: per-feature linear embedding into d_model, n_layer pre-norm
residual blocks (y = y + block(layernorm(y))), then a two-stage linear
head that first maps the time axis t_in -> t_out and then the channel
axis d_model -> n_features.

Parameter names are flat strings so the whole model round-trips through
the container format and the optimizer's frozen set:

    embed                 [F, d_model]
    layers.{i}.<field>    the nine block arrays
    layers.{i}.ln_scale   [d_model]
    layers.{i}.ln_shift   [d_model]
    head_time             [t_in, t_out]
    head_feat             [d_model, F]
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import selectivity
from .block import (
    PARAM_FIELDS,
    BlockHandle,
    MambaConfig,
    MambaParams,
    block_apply,
    draw_params,
)
from .data import DatasetSplit, make_windows
from .optim import Adam

LN_EPS = 1e-5

# the minimal set of arrays that carries input-dependent gating
SELECTIVE_FIELDS = ("a_log", "w_x", "b_dt")

FREEZE_NONE = "none"
FREEZE_A = "frozen-a"


@dataclass(frozen=True)
class ForecasterConfig:
    n_features: int
    d_model: int
    d_state: int
    n_layer: int
    t_in: int
    t_out: int
    d_conv: int = 4
    expand: int = 2

    def __post_init__(self):
        for name in ("n_features", "d_model", "d_state", "n_layer", "t_in", "t_out", "d_conv", "expand"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def block(self) -> MambaConfig:
        return MambaConfig(self.d_model, self.d_state, self.d_conv, self.expand)


@dataclass(frozen=True)
class TransferPlan:
    """How pretrained block arrays enter the forecaster.

    replace: fraction of layers (from the bottom) that receive copies.
    freeze: FREEZE_NONE, or FREEZE_A to pin a_log of each replaced layer.
    only_selective: copy just the selection pathway (a_log, w_x, b_dt).
    """

    replace: float = 0.0
    freeze: str = FREEZE_NONE
    only_selective: bool = False

    def __post_init__(self):
        if not 0.0 <= self.replace <= 1.0:
            raise ValueError(f"replace must be in [0, 1], got {self.replace}")
        if self.freeze not in (FREEZE_NONE, FREEZE_A):
            raise ValueError(f"freeze must be '{FREEZE_NONE}' or '{FREEZE_A}', got {self.freeze!r}")

    def n_replaced(self, n_layer: int) -> int:
        # nearest integer, half away from zero (round() would tie to even)
        return int(math.floor(self.replace * n_layer + 0.5))


def build_forecaster(cfg: ForecasterConfig, seed: int) -> dict[str, np.ndarray]:
    """Fresh parameters from one seeded stream. Draw order: embed, then each
    layer's block arrays, then the two head matrices; the layernorm arrays
    are deterministic ones/zeros."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}
    bound = 1.0 / math.sqrt(cfg.n_features)
    params["embed"] = rng.uniform(-bound, bound, size=(cfg.n_features, cfg.d_model))
    for i in range(cfg.n_layer):
        block = draw_params(cfg.block, rng)
        for name in PARAM_FIELDS:
            params[f"layers.{i}.{name}"] = getattr(block, name)
        params[f"layers.{i}.ln_scale"] = np.ones(cfg.d_model)
        params[f"layers.{i}.ln_shift"] = np.zeros(cfg.d_model)
    bound = 1.0 / math.sqrt(cfg.t_in)
    params["head_time"] = rng.uniform(-bound, bound, size=(cfg.t_in, cfg.t_out))
    bound = 1.0 / math.sqrt(cfg.d_model)
    params["head_feat"] = rng.uniform(-bound, bound, size=(cfg.d_model, cfg.n_features))
    return params


def param_names(cfg: ForecasterConfig) -> list[str]:
    names = ["embed"]
    for i in range(cfg.n_layer):
        names += [f"layers.{i}.{f}" for f in PARAM_FIELDS]
        names += [f"layers.{i}.ln_scale", f"layers.{i}.ln_shift"]
    names += ["head_time", "head_feat"]
    return names


def _layernorm(y: ad.Tensor, scale: ad.Tensor, shift: ad.Tensor, d_model: int) -> ad.Tensor:
    mu = y.sum_axis(-1, keepdims=True) / float(d_model)
    centered = y - mu
    var = (centered * centered).sum_axis(-1, keepdims=True) / float(d_model)
    inv = 1.0 / ad.sqrt(var + LN_EPS)
    return centered * inv * scale + shift


def forward(
    params: dict[str, ad.Tensor],
    x: ad.Tensor,
    cfg: ForecasterConfig,
    want_handles: bool = False,
):
    """Differentiable forecast. x: [B, t_in, F] -> [B, t_out, F].

    With want_handles=True also returns the per-layer BlockHandle list so
    callers can pull scan traces."""
    b, t_in, f = x.shape
    if t_in != cfg.t_in or f != cfg.n_features:
        raise ValueError(f"input shape {x.shape} does not match t_in={cfg.t_in}, n_features={cfg.n_features}")
    y = ad.matmul(x.reshape(b * t_in, f), params["embed"]).reshape(b, t_in, cfg.d_model)
    handles: list[BlockHandle] = []
    for i in range(cfg.n_layer):
        layer = {name: params[f"layers.{i}.{name}"] for name in PARAM_FIELDS}
        normed = _layernorm(y, params[f"layers.{i}.ln_scale"], params[f"layers.{i}.ln_shift"], cfg.d_model)
        handle = block_apply(layer, normed, cfg.block)
        handles.append(handle)
        y = y + handle.out
    # time mixing: [B, t_in, d] -> [B, d, t_in] @ [t_in, t_out] -> [B, d, t_out]
    yt = y.swap_last().reshape(b * cfg.d_model, cfg.t_in)
    yt = ad.matmul(yt, params["head_time"]).reshape(b, cfg.d_model, cfg.t_out)
    # feature mixing: [B, t_out, d] @ [d, F]
    yh = yt.swap_last().reshape(b * cfg.t_out, cfg.d_model)
    out = ad.matmul(yh, params["head_feat"]).reshape(b, cfg.t_out, cfg.n_features)
    if want_handles:
        return out, handles
    return out


def mae(pred: ad.Tensor, target: ad.Tensor) -> ad.Tensor:
    return ad.absval(pred - target).mean()


def mse(pred: ad.Tensor, target: ad.Tensor) -> ad.Tensor:
    diff = pred - target
    return (diff * diff).mean()


def predict(
    masters: dict[str, np.ndarray],
    cfg: ForecasterConfig,
    inputs: np.ndarray,
    batch_size: int = 64,
) -> np.ndarray:
    """Forward pass without gradient bookkeeping; inputs [M, t_in, F]."""
    if inputs.shape[0] == 0:
        return np.zeros((0, cfg.t_out, cfg.n_features))
    chunks = []
    for start in range(0, inputs.shape[0], batch_size):
        g = ad.Graph()
        params = {k: g.constant(v) for k, v in masters.items()}
        x = g.constant(inputs[start:start + batch_size])
        chunks.append(forward(params, x, cfg).value)
    return np.concatenate(chunks, axis=0)


def evaluate(
    masters: dict[str, np.ndarray],
    cfg: ForecasterConfig,
    inputs: np.ndarray,
    targets: np.ndarray,
    batch_size: int = 64,
) -> tuple[float, float]:
    """(MAE, MSE) over a window set, in normalized units."""
    pred = predict(masters, cfg, inputs, batch_size)
    err = pred - targets
    return float(np.abs(err).mean()), float((err * err).mean())


def transfer_params(
    fore: dict[str, np.ndarray],
    source,
    cfg: ForecasterConfig,
    plan: TransferPlan,
) -> frozenset[str]:
    """Copy pretrained block arrays into the first round(replace * n_layer)
    layers and return the parameter names the optimizer must leave frozen.
    Copies are deep, so later training never mutates the source. Calling
    twice with the same arguments is a no-op the second time."""
    if isinstance(source, MambaParams):
        source = source.as_dict()
    n_rep = plan.n_replaced(cfg.n_layer)
    if n_rep > 0:
        fields = SELECTIVE_FIELDS if plan.only_selective else PARAM_FIELDS
        for name in fields:
            if name not in source:
                raise ValueError(f"source is missing block array {name!r}")
        for i in range(n_rep):
            for name in fields:
                key = f"layers.{i}.{name}"
                if fore[key].shape != source[name].shape:
                    raise ValueError(
                        f"shape mismatch for {key}: forecaster {fore[key].shape}, source {source[name].shape}"
                    )
                fore[key] = np.array(source[name], dtype=np.float64, copy=True)
    if plan.freeze == FREEZE_A and n_rep > 0:
        return frozenset(f"layers.{i}.a_log" for i in range(n_rep))
    return frozenset()


class EpochRow(NamedTuple):
    epoch: int
    train_mae: float
    val_mae: float
    val_mse: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]  # best-validation snapshot
    history: list[EpochRow]
    best_epoch: int
    best_val_mae: float
    test_mae: float
    test_mse: float


def _cap_indices(n: int, cap: Optional[int]) -> np.ndarray:
    if cap is not None and cap < 1:
        raise ValueError(f"window cap must be at least 1, got {cap}")
    if cap is None or n <= cap:
        return np.arange(n)
    # evenly spaced deterministic subsample
    return np.unique(np.linspace(0, n - 1, cap).astype(int))


def train_forecaster(
    masters: dict[str, np.ndarray],
    cfg: ForecasterConfig,
    split: DatasetSplit,
    *,
    lr: float = 1e-4,
    epochs: int = 100,
    batch_size: int = 32,
    seed: int = 0,
    weight_decay: float = 0.0,
    frozen: Iterable[str] = (),
    max_train_batches: Optional[int] = None,
    max_eval_windows: Optional[int] = None,
    epoch_callback: Optional[Callable[[int, dict[str, np.ndarray], float, float], None]] = None,
) -> TrainResult:
    """Minimize MAE with Adam; keep the epoch with the lowest validation MAE
    (earliest wins ties). `masters` is updated in place to the final state
    of training; the returned params are the best snapshot.

    epoch_callback(epoch, masters, val_mae, val_mse) runs after each epoch
    with a read-only view of the live parameters."""
    train_w = make_windows(split.train, cfg.t_in, cfg.t_out)
    val_w = make_windows(split.val, cfg.t_in, cfg.t_out)
    test_w = make_windows(split.test, cfg.t_in, cfg.t_out)

    val_idx = _cap_indices(len(val_w), max_eval_windows)
    test_idx = _cap_indices(len(test_w), max_eval_windows)
    val_in, val_tg = val_w.inputs[val_idx], val_w.targets[val_idx]
    test_in, test_tg = test_w.inputs[test_idx], test_w.targets[test_idx]

    opt = Adam(masters, lr=lr, weight_decay=weight_decay, frozen=frozen)
    rng = np.random.Generator(np.random.PCG64(seed))
    m = len(train_w)

    best = {k: v.copy() for k, v in masters.items()}
    best_val = math.inf
    best_epoch = 0
    history: list[EpochRow] = []

    for epoch in range(1, epochs + 1):
        order = rng.permutation(m)
        n_batches = math.ceil(m / batch_size)
        if max_train_batches is not None:
            n_batches = min(n_batches, max_train_batches)
        batch_losses = []
        for b in range(n_batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            g = ad.Graph()
            params = {k: g.leaf(k, v) for k, v in masters.items()}
            x = g.constant(train_w.inputs[idx])
            target = g.constant(train_w.targets[idx])
            loss = mae(forward(params, x, cfg), target)
            g.set_output(loss)
            value = float(loss.value)
            if not math.isfinite(value):
                raise RuntimeError(f"training diverged at epoch {epoch}: loss {value}")
            batch_losses.append(value)
            opt.step(g.gradient())
        val_mae, val_mse = evaluate(masters, cfg, val_in, val_tg, batch_size=max(batch_size, 64))
        history.append(EpochRow(epoch, float(np.mean(batch_losses)), val_mae, val_mse))
        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best = {k: v.copy() for k, v in masters.items()}
        if epoch_callback is not None:
            epoch_callback(epoch, masters, val_mae, val_mse)

    test_mae, test_mse = evaluate(best, cfg, test_in, test_tg, batch_size=max(batch_size, 64))
    return TrainResult(
        params=best,
        history=history,
        best_epoch=best_epoch,
        best_val_mae=best_val if history else math.inf,
        test_mae=test_mae,
        test_mse=test_mse,
    )


def collect_scores(
    masters: dict[str, np.ndarray],
    cfg: ForecasterConfig,
    inputs: np.ndarray,
    batch_size: int = 16,
) -> np.ndarray:
    """Memory scores pooled over every layer and every probed window."""
    pooled = []
    for start in range(0, inputs.shape[0], batch_size):
        g = ad.Graph()
        params = {k: g.constant(v) for k, v in masters.items()}
        x = g.constant(inputs[start:start + batch_size])
        _, handles = forward(params, x, cfg, want_handles=True)
        for handle in handles:
            trace = handle.trace()
            for b in range(trace.hidden.shape[0]):
                pooled.append(selectivity.memory_scores(trace.hidden[b], trace.input_contrib[b]))
    return np.concatenate(pooled)
