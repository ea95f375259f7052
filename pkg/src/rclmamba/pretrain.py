"""Repeating-sequence augmentation and the repetitive contrastive losses.

Each timestep is repeated n_t times; copy 0 stays clean and later copies get
Gaussian noise from a non-decreasing ladder. The intra loss contrasts a
step's noisy copies (positives) against the next step's clean copy (the
single negative); the inter loss ties the original sequence's outputs to all
copies of the same step, again with the next original step as the negative.
Pretraining runs both through one shared block and follows their sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .block import MambaConfig, MambaParams, block_apply, init_params
from .optim import Adam


class PretrainDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss at epoch {epoch} (value {value})")
        self.epoch = epoch


@dataclass(frozen=True)
class NoiseLadder:
    """Per-copy noise standard deviations; index 0 is the clean copy."""

    sigmas: tuple[float, ...]

    def __post_init__(self):
        s = tuple(float(v) for v in self.sigmas)
        object.__setattr__(self, "sigmas", s)
        if len(s) < 1 or s[0] != 0.0:
            raise ValueError("ladder must start with sigma 0 (clean first copy)")
        if any(b < a for a, b in zip(s, s[1:])):
            raise ValueError(f"ladder must be non-decreasing, got {s}")
        if any(v < 0 for v in s):
            raise ValueError("ladder sigmas must be non-negative")

    def __len__(self) -> int:
        return len(self.sigmas)

    @classmethod
    def doubling(cls, base: float, n_t: int) -> "NoiseLadder":
        """[0, base, 2*base, 4*base, ...] — each repetition twice as noisy."""
        if n_t < 2 or base < 0:
            raise ValueError("doubling ladder needs n_t >= 2 and base >= 0")
        return cls((0.0,) + tuple(base * (2.0 ** k) for k in range(n_t - 1)))


@dataclass(frozen=True)
class PretrainConfig:
    n_t: int = 3
    ladder: NoiseLadder = field(default_factory=lambda: NoiseLadder((0.0, 1e-3, 1e-2)))
    tau: float = 0.1
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.n_t < 2:
            raise ValueError("n_t must be >= 2 (at least one repetition beyond the clean copy)")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if len(self.ladder) != self.n_t:
            raise ValueError(f"ladder length {len(self.ladder)} != n_t {self.n_t}")


@dataclass
class AugmentedBatch:
    original: np.ndarray   # [B, T, F]
    augmented: np.ndarray  # [B, n_t*T, F]
    n_t: int


def repeat_augment(x: np.ndarray, cfg: PretrainConfig, rng: np.random.Generator) -> AugmentedBatch:
    """Repeat every timestep n_t times and apply the noise ladder.

    Noise is drawn batch-major, then step, then copy, then feature, so the
    augmented batch is a pure function of (x, cfg, rng state).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"repeat_augment expects [B, T, F], got shape {x.shape}")
    nb, nt_len, nf = x.shape
    if nt_len < 2:
        raise ValueError("repeat_augment needs T >= 2 (losses contrast adjacent steps)")
    sig = np.asarray(cfg.ladder.sigmas, dtype=np.float64)
    if sig.shape[0] != cfg.n_t:
        raise ValueError(f"ladder length {sig.shape[0]} != n_t {cfg.n_t}")
    noise = rng.standard_normal((nb, nt_len, cfg.n_t, nf))
    aug = x[:, :, None, :] + sig[None, None, :, None] * noise
    aug[:, :, 0, :] = x  # clean copy bit-exact, no -0.0 surprises from +0.0
    return AugmentedBatch(
        original=x.copy(), augmented=aug.reshape(nb, cfg.n_t * nt_len, nf), n_t=cfg.n_t
    )


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_sim: zero-norm vector")
    return float(a @ b / (na * nb))


def _unit_rows(h: Tensor) -> Tensor:
    sq = (h * h).sum_axis(2, keepdims=True)
    return h / ad.sqrt(sq)


def _nce(anchors: Tensor, positives: list[Tensor], negative: Tensor, tau: float) -> Tensor:
    """-log(sum_p e^{sim_p/tau} / (sum_p e^{sim_p/tau} + e^{sim_neg/tau})),
    averaged over anchors and batch. All rows must be unit-normalized."""
    inv_tau = 1.0 / float(tau)
    p_sum = None
    for p in positives:
        term = ad.exp((anchors * p).sum_axis(2) * inv_tau)
        p_sum = term if p_sum is None else p_sum + term
    n_term = ad.exp((anchors * negative).sum_axis(2) * inv_tau)
    return (ad.log(p_sum + n_term) - ad.log(p_sum)).mean()


def _intra_tape(h_aug: Tensor, n_t: int, tau: float) -> Tensor:
    nb, total, _ = h_aug.shape
    if total % n_t != 0:
        raise ValueError(f"augmented length {total} not divisible by n_t {n_t}")
    s = total // n_t
    if s < 2:
        raise ValueError("intra_loss needs at least 2 underlying steps")
    hn = _unit_rows(h_aug)
    anchors = hn.slice(1, 0, (s - 1) * n_t, n_t)
    positives = [hn.slice(1, z, z + (s - 1) * n_t, n_t) for z in range(1, n_t)]
    negative = hn.slice(1, n_t, s * n_t, n_t)
    return _nce(anchors, positives, negative, tau)


def _inter_tape(h: Tensor, h_aug: Tensor, n_t: int, tau: float) -> Tensor:
    nb, s, _ = h.shape
    if s < 2:
        raise ValueError("inter_loss needs at least 2 steps")
    if h_aug.shape[1] != s * n_t:
        raise ValueError(
            f"misaligned lengths: original {s} steps vs augmented {h_aug.shape[1]} != {s}*{n_t}"
        )
    hn = _unit_rows(h)
    han = _unit_rows(h_aug)
    anchors = hn.slice(1, 0, s - 1)
    positives = [han.slice(1, z, z + (s - 1) * n_t, n_t) for z in range(n_t)]
    negative = hn.slice(1, 1, s)
    return _nce(anchors, positives, negative, tau)


def _eval_scalar(build) -> float:
    g = Graph()
    out = build(g)
    return float(out.value)


def intra_loss(h_aug: Union[Tensor, np.ndarray], n_t: int, tau: float) -> Union[Tensor, float]:
    """Contrast within the augmented sequence: anchor is the clean copy of
    step i, positives its n_t-1 noisy copies, negative the clean copy of
    step i+1."""
    if isinstance(h_aug, Tensor):
        return _intra_tape(h_aug, n_t, tau)
    arr = np.asarray(h_aug, dtype=np.float64)
    return _eval_scalar(lambda g: _intra_tape(g.constant(arr), n_t, tau))


def inter_loss(
    h: Union[Tensor, np.ndarray],
    h_aug: Union[Tensor, np.ndarray],
    n_t: int,
    tau: float,
) -> Union[Tensor, float]:
    """Contrast across sequences: anchor is the original step i, positives
    all n_t copies of step i in the augmented pass, negative step i+1."""
    if isinstance(h, Tensor) and isinstance(h_aug, Tensor):
        return _inter_tape(h, h_aug, n_t, tau)
    ha = np.asarray(h, dtype=np.float64)
    hb = np.asarray(h_aug, dtype=np.float64)
    return _eval_scalar(lambda g: _inter_tape(g.constant(ha), g.constant(hb), n_t, tau))


def rcl_loss(
    h: Union[Tensor, np.ndarray],
    h_aug: Union[Tensor, np.ndarray],
    n_t: int,
    tau: float,
) -> Union[Tensor, float]:
    """Unweighted sum of the intra and inter losses."""
    if isinstance(h, Tensor) and isinstance(h_aug, Tensor):
        return _intra_tape(h_aug, n_t, tau) + _inter_tape(h, h_aug, n_t, tau)
    ha = np.asarray(h, dtype=np.float64)
    hb = np.asarray(h_aug, dtype=np.float64)
    return _eval_scalar(
        lambda g: _intra_tape(g.constant(hb), n_t, tau)
        + _inter_tape(g.constant(ha), g.constant(hb), n_t, tau)
    )


class EpochLoss(NamedTuple):
    epoch: int
    intra: float
    inter: float
    total: float


@dataclass
class PretrainResult:
    params: MambaParams
    embed: np.ndarray           # [F, d_model], trained jointly, never transferred
    history: list[EpochLoss]


BatchSource = Union[Sequence[np.ndarray], Callable[[int], Iterable[np.ndarray]]]


def pretrain(
    cfg: PretrainConfig,
    block_cfg: MambaConfig,
    data: BatchSource,
    n_features: int,
) -> PretrainResult:
    """Single-block contrastive pretraining.

    Per batch: augment the raw window, embed both the original and the
    augmented window with a learned linear map, run both through the SAME
    block, and take an optimizer step on intra + inter. Everything is seeded
    from cfg.seed, so the loss history is bit-reproducible.
    """
    ss = np.random.SeedSequence(cfg.seed)
    seeds = ss.generate_state(3, dtype=np.uint64)
    embed_rng = np.random.Generator(np.random.PCG64(int(seeds[0])))
    noise_rng = np.random.Generator(np.random.PCG64(int(seeds[2])))

    dm = block_cfg.d_model
    bound = 1.0 / np.sqrt(n_features)
    embed = embed_rng.uniform(-bound, bound, size=(n_features, dm))
    params = init_params(block_cfg, int(seeds[1]))

    masters: dict[str, np.ndarray] = {"embed": embed}
    for name, arr in params.as_dict().items():
        masters[f"block.{name}"] = arr
    opt = Adam(masters, lr=cfg.lr, weight_decay=cfg.weight_decay)

    history: list[EpochLoss] = []
    for epoch in range(1, cfg.epochs + 1):
        batches = data(epoch) if callable(data) else data
        sums = np.zeros(3)
        count = 0
        for batch in batches:
            batch = np.asarray(batch, dtype=np.float64)
            if batch.ndim != 3 or batch.shape[2] != n_features:
                raise ValueError(f"batch shape {batch.shape} does not match F={n_features}")
            aug = repeat_augment(batch, cfg, noise_rng)

            g = Graph()
            leaves = {k: g.leaf(k, v) for k, v in masters.items()}
            blk = {name: leaves[f"block.{name}"] for name in params.as_dict()}
            nb, t_len, nf = batch.shape
            x_emb = (
                g.constant(aug.original).reshape(nb * t_len, nf) @ leaves["embed"]
            ).reshape(nb, t_len, dm)
            xa_emb = (
                g.constant(aug.augmented).reshape(nb * cfg.n_t * t_len, nf) @ leaves["embed"]
            ).reshape(nb, cfg.n_t * t_len, dm)

            h = block_apply(blk, x_emb, block_cfg).out
            h_aug = block_apply(blk, xa_emb, block_cfg).out
            li = _intra_tape(h_aug, cfg.n_t, cfg.tau)
            le = _inter_tape(h, h_aug, cfg.n_t, cfg.tau)
            loss = li + le
            g.set_output(loss)

            total = float(loss.value)
            if not np.isfinite(total):
                raise PretrainDiverged(epoch, total)
            opt.step(g.gradient())
            sums += (float(li.value), float(le.value), total)
            count += 1
        if count:
            history.append(
                EpochLoss(
                    epoch,
                    float(sums[0] / count),
                    float(sums[1] / count),
                    float(sums[2] / count),
                )
            )
        else:
            history.append(EpochLoss(epoch, float("nan"), float("nan"), float("nan")))

    final = MambaParams.from_dict(
        {name: masters[f"block.{name}"].copy() for name in params.as_dict()}
    )
    return PretrainResult(params=final, embed=masters["embed"].copy(), history=history)
