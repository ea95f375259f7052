"""Independent oracles and verification suites.

Everything here recomputes results by a route different from the one the
library takes: finite differences against the tape's analytic gradients,
an unrolled product-sum form of the scan against the recurrence, closed
forms for the contrastive losses, discretization error bounds, and a
closed-form stationarity analysis of the scan gates that is re-solved
numerically with a root finder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.optimize import root

from . import autodiff as ad
from .block import MambaConfig, init_params, selective_scan
from .pretrain import NoiseLadder, PretrainConfig, inter_loss, intra_loss, repeat_augment

SUITES = ("grad", "scan", "closed-form", "all")


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class FiniteDiffReport:
    max_abs_err: float
    per_leaf: dict[str, float]
    n_coords: int

    def ok(self, tol: float) -> bool:
        return self.max_abs_err < tol


def finite_diff_check(
    graph: ad.Graph,
    leaf_names: Optional[list[str]] = None,
    eps: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
    analytic: Optional[dict[str, np.ndarray]] = None,
) -> FiniteDiffReport:
    """Central-difference check of the graph's scalar output against its
    analytic gradients. Perturbations run through Graph.recompute, which
    replays the tape without touching stored values, so the analytic
    baseline cannot be contaminated.

    `analytic` overrides the tape's own gradients; tests use it to prove
    the checker catches an injected fault.
    """
    if analytic is None:
        analytic = graph.gradient()
    rng = np.random.Generator(np.random.PCG64(seed))
    names = leaf_names if leaf_names is not None else sorted(analytic)
    per_leaf: dict[str, float] = {}
    worst = 0.0
    total = 0
    for name in names:
        base = graph.leaf_value(name)
        grad = analytic[name]
        flat = base.ravel()
        n = flat.size
        if n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        leaf_worst = 0.0
        for c in coords:
            bumped = flat.copy()
            bumped[c] += eps
            f_plus = float(graph.recompute({name: bumped.reshape(base.shape)}))
            bumped[c] = flat[c] - eps
            f_minus = float(graph.recompute({name: bumped.reshape(base.shape)}))
            fd = (f_plus - f_minus) / (2.0 * eps)
            leaf_worst = max(leaf_worst, abs(fd - grad.ravel()[c]))
            total += 1
        per_leaf[name] = leaf_worst
        worst = max(worst, leaf_worst)
    return FiniteDiffReport(max_abs_err=worst, per_leaf=per_leaf, n_coords=total)


def build_rcl_graph(
    d_model: int = 4,
    d_state: int = 4,
    t_len: int = 8,
    batch: int = 2,
    n_t: int = 3,
    n_features: int = 3,
    seed: int = 0,
) -> ad.Graph:
    """The full pretraining loss as one differentiable graph: raw windows
    are noise-augmented, embedded, pushed through a single block, and fed
    to both contrastive terms. Leaves: embed plus the nine block arrays."""
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = MambaConfig(d_model=d_model, d_state=d_state)
    pcfg = PretrainConfig(n_t=n_t, ladder=NoiseLadder((0.0, 1e-3, 1e-2)[:n_t]), epochs=1)
    params = init_params(cfg, seed + 1)
    x = rng.standard_normal((batch, t_len, n_features))
    aug = repeat_augment(x, pcfg, rng)

    g = ad.Graph()
    embed = g.leaf("embed", rng.uniform(-0.5, 0.5, size=(n_features, d_model)))
    leaves = {name: g.leaf(name, arr) for name, arr in params.as_dict().items()}

    def embed_series(arr: np.ndarray) -> ad.Tensor:
        const = g.constant(arr)
        b, t, f = arr.shape
        return ad.matmul(const.reshape(b * t, f), embed).reshape(b, t, d_model)

    from .block import block_apply

    h = block_apply(leaves, embed_series(x), cfg).out
    h_aug = block_apply(leaves, embed_series(aug.augmented), cfg).out
    loss = intra_loss(h_aug, n_t, pcfg.tau) + inter_loss(h, h_aug, n_t, pcfg.tau)
    g.set_output(loss)
    return g


# ---------------------------------------------------------------------------
# scan oracle: unrolled product-sum instead of the recurrence

def brute_scan(
    abar: np.ndarray,
    bbar: np.ndarray,
    c: np.ndarray,
    x: np.ndarray,
    d_skip: np.ndarray,
) -> np.ndarray:
    """h_t = sum_{s<=t} (prod_{r=s+1..t} abar_r) bbar_s x_s, written as
    literal Python loops. Same math as the recurrence, different route."""
    t_len, d, n = abar.shape
    out = np.zeros((t_len, d))
    for t in range(t_len):
        for i in range(d):
            for j in range(n):
                h = 0.0
                for s in range(t + 1):
                    prod = 1.0
                    for r in range(s + 1, t + 1):
                        prod *= abar[r, i, j]
                    h += prod * bbar[s, i, j] * x[s, i]
                out[t, i] += c[t, j] * h
            out[t, i] += d_skip[i] * x[t, i]
    return out


def random_scan_instance(rng: np.random.Generator):
    t_len = int(rng.integers(3, 10))
    d = int(rng.integers(1, 5))
    n = int(rng.integers(1, 5))
    abar = rng.uniform(0.05, 0.99, size=(t_len, d, n))
    bbar = rng.standard_normal((t_len, d, n))
    c = rng.standard_normal((t_len, n))
    x = rng.standard_normal((t_len, d))
    d_skip = rng.standard_normal(d)
    return abar, bbar, c, x, d_skip


# ---------------------------------------------------------------------------
# gate stationarity: one scalar state, one step, tau = 1

def gate_objective(a: float, b: float, h: float, x: float, sigma: float, x_next: float) -> float:
    """Contrastive advantage of keeping state h against taking input x with
    worst-case noise sigma, when the competing step carries x_next."""
    return (a * a - a) * h * h + (a * b - b) * (x + sigma) * h + b * x_next * h


def gate_gradient(a: float, b: float, h: float, x: float, sigma: float, x_next: float) -> tuple[float, float]:
    dfda = (2.0 * a - 1.0) * h * h + b * (x + sigma) * h
    dfdb = (a - 1.0) * (x + sigma) * h + x_next * h
    return dfda, dfdb


def optimal_gates(h: float, x: float, sigma: float, x_next: float) -> tuple[float, float, float]:
    """Closed-form stationary point (a*, b*) and the objective value there."""
    xs = x + sigma
    if xs == 0.0 or h == 0.0:
        raise ValueError("degenerate instance: need x + sigma != 0 and h != 0")
    b_star = h * (2.0 * x_next - x - sigma) / (xs * xs)
    a_star = (h * h - b_star * xs * h) / (2.0 * h * h)
    bound = ((x_next * x_next - x_next * xs) / (xs * xs)) * h * h
    return a_star, b_star, bound


@dataclass
class StationarityReport:
    n_instances: int
    max_grad_residual: float
    max_bound_gap: float
    max_root_distance: float

    def ok(self, grad_tol: float = 1e-9, root_tol: float = 1e-6) -> bool:
        return (
            self.max_grad_residual < grad_tol
            and self.max_bound_gap < grad_tol
            and self.max_root_distance < root_tol
        )


def check_gate_stationarity(n_instances: int = 1000, seed: int = 0) -> StationarityReport:
    """Random instances: closed form must zero the gradient, hit the bound,
    and agree with scipy's root finder solving the same system."""
    rng = np.random.Generator(np.random.PCG64(seed))
    max_res = 0.0
    max_gap = 0.0
    max_root = 0.0
    for _ in range(n_instances):
        h = float(rng.uniform(0.2, 2.0) * rng.choice((-1.0, 1.0)))
        x = float(rng.uniform(0.2, 2.0) * rng.choice((-1.0, 1.0)))
        sigma = float(rng.uniform(0.0, 0.3))
        while abs(x + sigma) < 0.1:
            x = float(rng.uniform(0.2, 2.0) * rng.choice((-1.0, 1.0)))
        x_next = float(rng.uniform(-2.0, 2.0))
        a_star, b_star, bound = optimal_gates(h, x, sigma, x_next)
        dfda, dfdb = gate_gradient(a_star, b_star, h, x, sigma, x_next)
        max_res = max(max_res, abs(dfda), abs(dfdb))
        max_gap = max(max_gap, abs(gate_objective(a_star, b_star, h, x, sigma, x_next) - bound))
        sol = root(lambda v: gate_gradient(v[0], v[1], h, x, sigma, x_next), x0=[0.25, 0.25])
        if not sol.success:
            max_root = math.inf
        else:
            max_root = max(max_root, abs(sol.x[0] - a_star), abs(sol.x[1] - b_star))
    return StationarityReport(n_instances, max_res, max_gap, max_root)


def sigma_sweep(
    h: float = 1.0,
    x: float = 1.0,
    x_next: float = 0.5,
    sigmas: Optional[np.ndarray] = None,
) -> list[tuple[float, float, float, float]]:
    """(sigma, a*, b*, bound) rows for a noise-scale sweep."""
    if sigmas is None:
        sigmas = np.linspace(0.0, 0.5, 26)
    rows = []
    for s in sigmas:
        a_star, b_star, bound = optimal_gates(h, x, float(s), x_next)
        rows.append((float(s), a_star, b_star, bound))
    return rows


def write_sigma_sweep(path: Union[str, Path], rows) -> None:
    with open(path, "w") as fh:
        fh.write("sigma,a_star,b_star,bound\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")


# ---------------------------------------------------------------------------
# contrastive-loss closed forms

@dataclass
class ClosedFormCase:
    name: str
    computed: float
    expected: float

    @property
    def error(self) -> float:
        return abs(self.computed - self.expected)


def closed_form_cases() -> list[ClosedFormCase]:
    """Hand-constructed embeddings whose loss values reduce to logarithms."""
    cases = []
    d = 5
    v = np.zeros(d)
    v[0] = 1.0

    # identical embeddings, three copies per step: similarities all 1, every
    # exponential cancels, intra = ln(3/2), inter = ln(4/3)
    n_t = 3
    h_aug = np.tile(v, (1, 2 * n_t, 1))
    h = np.tile(v, (1, 2, 1))
    cases.append(ClosedFormCase("intra-equal", intra_loss(h_aug, n_t, 0.1), math.log(1.5)))
    cases.append(ClosedFormCase("inter-equal", inter_loss(h, h_aug, n_t, 0.1), math.log(4.0 / 3.0)))

    # two copies per step, positive aligned, negative anti-aligned, tau = 1:
    # intra = ln(1 + e^-2)
    h_aug2 = np.zeros((1, 4, d))
    h_aug2[0, 0] = v
    h_aug2[0, 1] = v
    h_aug2[0, 2] = -v
    h_aug2[0, 3] = v
    cases.append(ClosedFormCase("intra-opposed", intra_loss(h_aug2, 2, 1.0), math.log(1.0 + math.exp(-2.0))))

    # huge temperature flattens every similarity to exp(0): the loss is the
    # count ratio ln((P+1)/P)
    rng = np.random.Generator(np.random.PCG64(7))
    h_big = rng.standard_normal((2, 3, d))
    aug_big = rng.standard_normal((2, 9, d))
    cases.append(ClosedFormCase("intra-flat", intra_loss(aug_big, 3, 1e12), math.log(1.5)))
    cases.append(ClosedFormCase("inter-flat", inter_loss(h_big, aug_big, 3, 1e12), math.log(4.0 / 3.0)))
    return cases


# ---------------------------------------------------------------------------
# discretization error bounds

@dataclass
class ZohReport:
    n_instances: int
    deltas: tuple[float, ...]
    all_within: bool
    worst_excess: float


def check_zoh_bounds(
    deltas: tuple[float, ...] = (1e-2, 1e-3, 1e-4),
    n_instances: int = 100,
    seed: int = 0,
) -> ZohReport:
    """For stable diagonal dynamics: max|exp(dA) - 1| <= 2 d |A|_max and
    max|bbar - d b| <= d^2 |A|_max |b|_max."""
    from .block import discretize

    rng = np.random.Generator(np.random.PCG64(seed))
    worst = -math.inf
    ok = True
    for _ in range(n_instances):
        d = int(rng.integers(1, 6))
        n = int(rng.integers(1, 6))
        a = -rng.uniform(0.1, 8.0, size=(d, n))
        b = rng.standard_normal(n)
        for delta in deltas:
            abar, bbar = discretize(a, b, np.full(d, delta))
            a_norm = float(np.abs(a).max())
            b_norm = float(np.abs(b).max())
            lhs_a = float(np.abs(abar - 1.0).max())
            lhs_b = float(np.abs(bbar - delta * b[None, :]).max())
            excess = max(lhs_a - 2.0 * delta * a_norm, lhs_b - delta * delta * a_norm * b_norm)
            worst = max(worst, excess)
            if excess > 0:
                ok = False
    return ZohReport(n_instances, deltas, ok, worst)


# ---------------------------------------------------------------------------
# suites

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class SuiteResult:
    suite: str
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks
            ],
        }


def _grad_checks(seed: int) -> list[CheckResult]:
    g = build_rcl_graph(seed=seed)
    report = finite_diff_check(g, max_coords=60, seed=seed)
    return [
        CheckResult(
            "grad-rcl-loss",
            report.ok(1e-4),
            f"max |fd - analytic| = {report.max_abs_err:.3e} over {report.n_coords} coords (tol 1e-4)",
        )
    ]


def _scan_checks(seed: int) -> list[CheckResult]:
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for _ in range(100):
        abar, bbar, c, x, d_skip = random_scan_instance(rng)
        o, _ = selective_scan(abar, bbar, c, x, d_skip)
        worst = max(worst, float(np.abs(o - brute_scan(abar, bbar, c, x, d_skip)).max()))
    zoh = check_zoh_bounds(seed=seed)
    return [
        CheckResult("scan-vs-brute", worst < 1e-10, f"max |diff| = {worst:.3e} over 100 instances (tol 1e-10)"),
        CheckResult("zoh-bounds", zoh.all_within, f"worst bound excess = {zoh.worst_excess:.3e} (must be <= 0)"),
    ]


def _closed_form_checks(seed: int) -> list[CheckResult]:
    st = check_gate_stationarity(n_instances=1000, seed=seed)
    out = [
        CheckResult(
            "gate-stationarity",
            st.ok(),
            f"max grad residual {st.max_grad_residual:.3e} (tol 1e-9), "
            f"bound gap {st.max_bound_gap:.3e} (tol 1e-9), "
            f"root distance {st.max_root_distance:.3e} (tol 1e-6)",
        )
    ]
    for case in closed_form_cases():
        out.append(
            CheckResult(
                f"loss-{case.name}",
                case.error < 1e-9,
                f"computed {case.computed!r}, expected {case.expected!r}, err {case.error:.3e}",
            )
        )
    return out


def run_suite(suite: str, seed: int = 0) -> SuiteResult:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choices: {', '.join(SUITES)}")
    result = SuiteResult(suite=suite)
    if suite in ("grad", "all"):
        result.checks += _grad_checks(seed)
    if suite in ("scan", "all"):
        result.checks += _scan_checks(seed)
    if suite in ("closed-form", "all"):
        result.checks += _closed_form_checks(seed)
    return result
