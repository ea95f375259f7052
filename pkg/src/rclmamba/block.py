"""The selective state-space block.

One block is: input projection split into a data branch and a gate branch,
causal depthwise convolution + SiLU on the data branch, per-step generation
of (delta, B, C) from the convolved signal, zero-order-hold discretization,
the linear state recurrence, gating, and an output projection.

`block_forward` is the plain-array entry point; `block_apply` assembles the
same computation on a caller-supplied Graph so it can sit inside a training
loss. Both share every numeric path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor


@dataclass(frozen=True)
class MambaConfig:
    d_model: int
    d_state: int
    d_conv: int = 4
    expand: int = 2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"MambaConfig.{f.name} must be a positive int, got {v!r}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def dt_rank(self) -> int:
        # low-rank bottleneck for the step-size path
        return max(1, math.ceil(self.d_model / 16))


# names in serialization / draw order
PARAM_FIELDS = (
    "w_in", "conv_w", "conv_b", "w_x", "w_dt", "b_dt", "a_log", "d_skip", "w_out",
)


@dataclass
class MambaParams:
    """All learnable arrays of one block. A = -exp(a_log) keeps the state
    transition strictly negative regardless of what the optimizer does."""

    w_in: np.ndarray      # [d_model, 2*d_inner]
    conv_w: np.ndarray    # [d_inner, d_conv]
    conv_b: np.ndarray    # [d_inner]
    w_x: np.ndarray       # [d_inner, dt_rank + 2*d_state]
    w_dt: np.ndarray      # [dt_rank, d_inner]
    b_dt: np.ndarray      # [d_inner]
    a_log: np.ndarray     # [d_inner, d_state]
    d_skip: np.ndarray    # [d_inner]
    w_out: np.ndarray     # [d_inner, d_model]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "MambaParams":
        return cls(**{name: np.asarray(d[name], dtype=np.float64) for name in PARAM_FIELDS})

    def copy(self) -> "MambaParams":
        return MambaParams(**{name: getattr(self, name).copy() for name in PARAM_FIELDS})

    def check_shapes(self, cfg: MambaConfig) -> None:
        di, n, r = cfg.d_inner, cfg.d_state, cfg.dt_rank
        expected = {
            "w_in": (cfg.d_model, 2 * di),
            "conv_w": (di, cfg.d_conv),
            "conv_b": (di,),
            "w_x": (di, r + 2 * n),
            "w_dt": (r, di),
            "b_dt": (di,),
            "a_log": (di, n),
            "d_skip": (di,),
            "w_out": (di, cfg.d_model),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"param {name}: expected shape {shape}, got {got}")


class ScanTrace(NamedTuple):
    """Per-step internals of one unbatched scan."""
    hidden: np.ndarray          # [T, d_inner, d_state]
    input_contrib: np.ndarray   # [T, d_inner, d_state]


@dataclass
class BlockTrace:
    """Per-step internals of a batched block forward.

    Invariant: hidden[:, t] = abar_t * hidden[:, t-1] + input_contrib[:, t]
    exactly, because all three arrays come out of the same recurrence.
    """
    hidden: np.ndarray          # [B, T, d_inner, d_state]
    delta: np.ndarray           # [B, T, d_inner]
    input_contrib: np.ndarray   # [B, T, d_inner, d_state]


def init_params(cfg: MambaConfig, seed: int) -> MambaParams:
    """Deterministic initialization from one seed.

    a_log rows are ln(1..d_state) so A starts at (-1, -2, ..., -d_state);
    b_dt is set so softplus(b_dt) lands log-uniformly in [1e-3, 1e-1];
    projections are uniform +-1/sqrt(fan_in); the skip path starts at 1.
    """
    return draw_params(cfg, np.random.Generator(np.random.PCG64(seed)))


def draw_params(cfg: MambaConfig, rng: np.random.Generator) -> MambaParams:
    """Same distributions and draw order as init_params, but consuming an
    existing stream so a larger model can initialize several blocks from
    one seed."""
    di, n, r = cfg.d_inner, cfg.d_state, cfg.dt_rank

    def uni(fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    w_in = uni(cfg.d_model, (cfg.d_model, 2 * di))
    conv_w = uni(cfg.d_conv, (di, cfg.d_conv))
    conv_b = uni(cfg.d_conv, (di,))
    w_x = uni(di, (di, r + 2 * n))
    w_dt = uni(r, (r, di))
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=di))
    b_dt = dt + np.log(-np.expm1(-dt))  # inverse softplus
    a_log = np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (di, 1))
    d_skip = np.ones(di, dtype=np.float64)
    w_out = uni(di, (di, cfg.d_model))
    return MambaParams(w_in, conv_w, conv_b, w_x, w_dt, b_dt, a_log, d_skip, w_out)


def discretize(
    a: np.ndarray, b_t: np.ndarray, delta_t: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization for one timestep.

    abar[i,j] = exp(delta[i] a[i,j]);
    bbar[i,j] = ((exp(delta[i] a[i,j]) - 1) / (delta[i] a[i,j])) delta[i] b[j],
    with |delta a| < 1e-8 evaluated as delta[i] b[j] (removable singularity).
    """
    a = np.asarray(a, dtype=np.float64)
    b_t = np.asarray(b_t, dtype=np.float64)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if np.any(delta_t <= 0):
        raise ValueError("discretize: delta must be strictly positive")
    if a.ndim != 2 or b_t.ndim != 1 or delta_t.ndim != 1:
        raise ValueError(
            f"discretize: expected a [d,n], b [n], delta [d]; "
            f"got {a.shape}, {b_t.shape}, {delta_t.shape}"
        )
    da = delta_t[:, None] * a
    abar = np.exp(da)
    bbar = ad._expm1x(da) * delta_t[:, None] * b_t[None, :]
    return abar, bbar


def selective_scan(
    abar: np.ndarray,
    bbar: np.ndarray,
    c: np.ndarray,
    x: np.ndarray,
    d_skip: np.ndarray,
    want_trace: bool = False,
) -> tuple[np.ndarray, Optional[ScanTrace]]:
    """Run the recurrence h_t = abar_t * h_{t-1} + bbar_t x_t from h_0 = 0
    and read out o_t[i] = sum_j c_t[j] h_t[i,j] + d_skip[i] x_t[i].

    Shapes: abar, bbar [T, d, n]; c [T, n]; x [T, d]; d_skip [d].
    """
    abar = np.asarray(abar, dtype=np.float64)
    bbar = np.asarray(bbar, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d_skip = np.asarray(d_skip, dtype=np.float64)
    if abar.ndim != 3 or abar.shape != bbar.shape:
        raise ValueError(f"scan shape mismatch: abar {abar.shape} vs bbar {bbar.shape}")
    t_len, d, n = abar.shape
    if c.shape != (t_len, n) or x.shape != (t_len, d) or d_skip.shape != (d,):
        raise ValueError(
            f"scan shape mismatch: abar {abar.shape}, c {c.shape}, "
            f"x {x.shape}, d_skip {d_skip.shape}"
        )
    o, h = ad.scan_forward(abar[None], bbar[None], c[None], x[None], d_skip)
    trace = None
    if want_trace:
        trace = ScanTrace(hidden=h[0], input_contrib=bbar * x[..., None])
    return o[0], trace


class BlockHandle(NamedTuple):
    """Tape tensors needed to pull a BlockTrace out of a live graph."""
    out: Tensor      # block output H [B, T, d_model]
    scan: Tensor     # scan output o [B, T, d_inner]; node cache holds internals
    delta: Tensor    # [B, T, d_inner]

    def trace(self) -> BlockTrace:
        hidden, _abar, _phi, ic, _da = self.scan.graph.nodes[self.scan.idx].cache
        return BlockTrace(hidden=hidden, delta=self.delta.value, input_contrib=ic)


def block_apply(params: dict[str, Tensor], x: Tensor, cfg: MambaConfig) -> BlockHandle:
    """Assemble one block on the graph that owns `x`.

    `params` maps the PARAM_FIELDS names to tensors on the same graph.
    """
    nb, nt, dm = x.shape
    if dm != cfg.d_model:
        raise ValueError(f"block input width {dm} != d_model {cfg.d_model}")
    di, n, r = cfg.d_inner, cfg.d_state, cfg.dt_rank

    xw = (x.reshape(nb * nt, dm) @ params["w_in"]).reshape(nb, nt, 2 * di)
    u = xw.slice(2, 0, di)
    z = xw.slice(2, di, 2 * di)
    u = ad.silu(ad.causal_conv(u, params["conv_w"], params["conv_b"]))

    proj = (u.reshape(nb * nt, di) @ params["w_x"]).reshape(nb, nt, r + 2 * n)
    dt_logits = proj.slice(2, 0, r)
    b_seq = proj.slice(2, r, r + n)
    c_seq = proj.slice(2, r + n, r + 2 * n)
    delta = ad.softplus(
        (dt_logits.reshape(nb * nt, r) @ params["w_dt"]).reshape(nb, nt, di)
        + params["b_dt"]
    )

    a = -ad.exp(params["a_log"])                      # [di, n], strictly negative
    o = ad.sscan(a, delta, b_seq, c_seq, u, params["d_skip"])
    h_out = ((o * ad.silu(z)).reshape(nb * nt, di) @ params["w_out"]).reshape(nb, nt, dm)
    return BlockHandle(out=h_out, scan=o, delta=delta)


def block_forward(
    params: MambaParams, x: np.ndarray, want_trace: bool = False
) -> tuple[np.ndarray, Optional[BlockTrace]]:
    """Plain-array block forward: [B, T, d_model] -> [B, T, d_model]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"block_forward expects [B, T, d_model], got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("block_forward: non-finite input")
    d_model = params.w_in.shape[0]
    d_inner = params.w_in.shape[1] // 2
    cfg = MambaConfig(
        d_model=d_model,
        d_state=params.a_log.shape[1],
        d_conv=params.conv_w.shape[1],
        expand=d_inner // d_model,
    )
    params.check_shapes(cfg)
    g = Graph()
    pt = {name: g.constant(arr) for name, arr in params.as_dict().items()}
    handle = block_apply(pt, g.constant(x), cfg)
    trace = handle.trace() if want_trace else None
    return handle.out.value, trace
