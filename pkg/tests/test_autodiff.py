"""Tape and operator tests.

Every differentiable op gets a central-difference check on a small random
instance; structural ops (slice, reshape) additionally get exact gradient
assertions, and the two scan primitives are cross-checked against each other
and against an unrolled closed form.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import rclmamba.autodiff as ad
from rclmamba.autodiff import Graph, GraphError
from rclmamba.verify import brute_scan, finite_diff_check, random_scan_instance


def _rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def _fd(build, leaves, tol=1e-6, seed=0, max_coords=200):
    """Build a graph from named leaf arrays, set the scalar output produced
    by `build`, and compare analytic gradients to central differences."""
    g = Graph()
    ts = {k: g.leaf(k, v) for k, v in leaves.items()}
    g.set_output(build(g, ts))
    rep = finite_diff_check(g, max_coords=max_coords, seed=seed)
    assert rep.max_abs_err < tol, rep.per_leaf
    return rep


# -- elementwise and reduction ops -------------------------------------------


def test_add_sub_fd():
    r = _rng(1)
    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    _fd(lambda g, t: (t["a"] + t["b"]).total(), {"a": a, "b": b})
    _fd(lambda g, t: (t["a"] - t["b"]).total(), {"a": a, "b": b})


def test_mul_div_fd():
    r = _rng(2)
    a = r.normal(size=(2, 5))
    b = r.uniform(0.5, 2.0, size=(2, 5))
    _fd(lambda g, t: (t["a"] * t["b"]).total(), {"a": a, "b": b})
    _fd(lambda g, t: (t["a"] / t["b"]).total(), {"a": a, "b": b})


def test_neg_abs_fd():
    r = _rng(3)
    a = r.normal(size=(4,)) + np.sign(r.normal(size=(4,))) * 0.5  # keep |a| > 0
    a[a == 0] = 0.7
    _fd(lambda g, t: (-t["a"]).total(), {"a": a})
    _fd(lambda g, t: ad.absval(t["a"]).total(), {"a": a})


def test_exp_log_sqrt_fd():
    r = _rng(4)
    a = r.uniform(0.2, 3.0, size=(3, 3))
    _fd(lambda g, t: ad.exp(t["a"]).total(), {"a": a})
    _fd(lambda g, t: ad.log(t["a"]).total(), {"a": a})
    _fd(lambda g, t: ad.sqrt(t["a"]).total(), {"a": a})


def test_silu_softplus_fd():
    r = _rng(5)
    a = r.normal(size=(2, 6)) * 2.0
    _fd(lambda g, t: ad.silu(t["a"]).total(), {"a": a})
    _fd(lambda g, t: ad.softplus(t["a"]).total(), {"a": a})


def test_expm1x_fd_and_guard():
    # smooth through the removable singularity at 0
    a = np.array([[-2.0, -0.3, 0.0, 1e-9, 0.4, 2.0]])
    rep = _fd(lambda g, t: ad.expm1x(t["a"]).total(), {"a": a})
    assert rep.max_abs_err < 1e-6

    g = Graph()
    t = g.leaf("a", a)
    out = ad.expm1x(t)
    # phi(0) = 1 exactly, phi'(0) = 1/2 exactly
    assert out.value[0, 2] == 1.0
    assert out.value[0, 3] == 1.0
    g.set_output(out.total())
    grads = g.gradient()
    assert grads["a"][0, 2] == 0.5
    assert grads["a"][0, 3] == 0.5


def test_matmul_fd_and_rank_errors():
    r = _rng(6)
    a, b = r.normal(size=(3, 4)), r.normal(size=(4, 2))
    _fd(lambda g, t: (t["a"] @ t["b"]).total(), {"a": a, "b": b})

    g = Graph()
    ta = g.leaf("a", r.normal(size=(3,)))
    tb = g.leaf("b", r.normal(size=(3, 2)))
    with pytest.raises(ValueError, match="rank-2"):
        ta @ tb
    tc = g.leaf("c", r.normal(size=(2, 2)))
    td = g.leaf("d", r.normal(size=(3, 2)))
    with pytest.raises(ValueError, match="shape mismatch"):
        tc @ td


def test_reductions_fd_and_values():
    r = _rng(7)
    a = r.normal(size=(2, 3, 4))
    _fd(lambda g, t: t["a"].sum_axis(1).total(), {"a": a})
    _fd(lambda g, t: t["a"].sum_axis(2, keepdims=True).total(), {"a": a})
    _fd(lambda g, t: t["a"].mean(), {"a": a})

    g = Graph()
    t = g.leaf("a", a)
    assert np.array_equal(t.sum_axis(1).value, a.sum(axis=1))
    assert t.sum_axis(0, keepdims=True).shape == (1, 3, 4)
    assert np.isclose(t.mean().value, a.mean())
    assert np.isclose(t.total().value, a.sum())


def test_reshape_swap_fd():
    r = _rng(8)
    a = r.normal(size=(2, 3, 4))
    _fd(lambda g, t: t["a"].reshape(6, 4).total(), {"a": a})
    _fd(lambda g, t: t["a"].swap_last().total(), {"a": a})

    g = Graph()
    t = g.leaf("a", a)
    assert np.array_equal(t.swap_last().value, np.swapaxes(a, -1, -2))


def test_slice_gradient_is_exact_scatter():
    a = np.arange(24.0).reshape(2, 12)
    g = Graph()
    t = g.leaf("a", a)
    s = t.slice(1, 1, 11, 3)  # columns 1, 4, 7, 10
    assert np.array_equal(s.value, a[:, 1:11:3])
    g.set_output(s.total())
    grad = g.gradient()["a"]
    want = np.zeros_like(a)
    want[:, 1:11:3] = 1.0
    assert np.array_equal(grad, want)


def test_silu_value_matches_definition():
    x = np.linspace(-4, 4, 17)
    g = Graph()
    out = ad.silu(g.leaf("x", x)).value
    assert np.allclose(out, x / (1.0 + np.exp(-x)), atol=1e-14)


# -- broadcasting ------------------------------------------------------------


def test_broadcast_add_gradient_counts_uses():
    a = np.zeros((3, 1, 4))
    b = np.zeros((2, 4))
    g = Graph()
    ta, tb = g.leaf("a", a), g.leaf("b", b)
    out = ta + tb
    assert out.shape == (3, 2, 4)
    g.set_output(out.total())
    grads = g.gradient()
    # each element of a is used twice, each element of b three times
    assert np.array_equal(grads["a"], np.full((3, 1, 4), 2.0))
    assert np.array_equal(grads["b"], np.full((2, 4), 3.0))


@st.composite
def _broadcast_pair(draw):
    rank = draw(st.integers(1, 3))
    base = tuple(draw(st.integers(1, 4)) for _ in range(rank))
    drop = draw(st.integers(0, rank - 1))
    other = tuple(
        1 if draw(st.booleans()) else d for d in base[drop:]
    )
    if other == ():
        other = (1,)
    return base, other


@given(_broadcast_pair(), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_broadcast_mul_matches_numpy_and_fd(shapes, seed):
    sa, sb = shapes
    r = _rng(seed)
    a = r.uniform(0.5, 1.5, size=sa)
    b = r.uniform(0.5, 1.5, size=sb)
    g = Graph()
    ta, tb = g.leaf("a", a), g.leaf("b", b)
    out = ta * tb
    assert np.array_equal(out.value, a * b)
    g.set_output(out.total())
    rep = finite_diff_check(g, max_coords=40, seed=seed)
    assert rep.max_abs_err < 1e-6


def test_scalar_operand_coercion():
    a = np.array([1.0, 2.0, 4.0])
    g = Graph()
    t = g.leaf("a", a)
    assert np.array_equal((2.0 + t).value, a + 2.0)
    assert np.array_equal((2.0 - t).value, 2.0 - a)
    assert np.array_equal((3.0 * t).value, 3.0 * a)
    assert np.array_equal((1.0 / t).value, 1.0 / a)
    assert np.array_equal((t / 2.0).value, a / 2.0)


# -- numerical stability of the sigmoid-family helpers -----------------------


def test_extreme_inputs_stay_finite():
    x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    g = Graph()
    t = g.leaf("x", x)
    sp = ad.softplus(t)
    si = ad.silu(t)
    assert np.all(np.isfinite(sp.value))
    assert np.all(np.isfinite(si.value))
    assert sp.value[0] == 0.0
    assert sp.value[-1] == 1e4
    assert np.isclose(sp.value[2], np.log(2.0))
    assert np.isclose(si.value[0], 0.0)
    assert np.isclose(si.value[-1], 1e4)
    g.set_output((sp + si).total())
    grads = g.gradient()["x"]
    assert np.all(np.isfinite(grads))


# -- convolution --------------------------------------------------------------


def test_causal_conv_matches_loop_oracle():
    r = _rng(9)
    nb, nt, nd, k = 2, 5, 3, 3
    x = r.normal(size=(nb, nt, nd))
    w = r.normal(size=(nd, k))
    b = r.normal(size=(nd,))
    g = Graph()
    out = ad.causal_conv(g.leaf("x", x), g.leaf("w", w), g.leaf("b", b)).value

    want = np.zeros((nb, nt, nd))
    for bi in range(nb):
        for t in range(nt):
            for c in range(nd):
                acc = b[c]
                for j in range(k):
                    src = t - (k - 1) + j
                    if src >= 0:
                        acc += w[c, j] * x[bi, src, c]
                want[bi, t, c] = acc
    assert np.allclose(out, want, atol=1e-13)


def test_causal_conv_fd_and_short_sequence():
    r = _rng(10)
    x = r.normal(size=(1, 2, 2))  # T shorter than the kernel
    w = r.normal(size=(2, 4))
    b = r.normal(size=(2,))
    _fd(
        lambda g, t: ad.causal_conv(t["x"], t["w"], t["b"]).total(),
        {"x": x, "w": w, "b": b},
    )


def test_causal_conv_is_causal():
    r = _rng(11)
    x = r.normal(size=(1, 6, 3))
    w = r.normal(size=(3, 3))
    b = r.normal(size=(3,))
    g = Graph()
    base = ad.causal_conv(g.leaf("x", x), g.leaf("w", w), g.leaf("b", b)).value
    x2 = x.copy()
    x2[0, 5, :] += 10.0
    g2 = Graph()
    bumped = ad.causal_conv(g2.leaf("x", x2), g2.leaf("w", w), g2.leaf("b", b)).value
    assert np.array_equal(base[:, :5], bumped[:, :5])
    assert not np.allclose(base[:, 5], bumped[:, 5])


# -- scan primitives ----------------------------------------------------------


def test_scan_matches_unrolled_form():
    r = _rng(12)
    for _ in range(25):
        abar, bbar, c, x, d_skip = random_scan_instance(r)
        g = Graph()
        out = ad.selective_scan_op(
            g.leaf("abar", abar[None]),
            g.leaf("bbar", bbar[None]),
            g.leaf("c", c[None]),
            g.leaf("x", x[None]),
            g.leaf("d", d_skip),
        ).value[0]
        want = brute_scan(abar, bbar, c, x, d_skip)
        assert np.max(np.abs(out - want)) < 1e-10


def test_scan_fd():
    r = _rng(13)
    abar, bbar, c, x, d_skip = random_scan_instance(r)
    _fd(
        lambda g, t: ad.selective_scan_op(
            t["abar"], t["bbar"], t["c"], t["x"], t["d"]
        ).total(),
        {
            "abar": abar[None],
            "bbar": bbar[None],
            "c": c[None],
            "x": x[None],
            "d": d_skip,
        },
        tol=1e-5,
    )


def _sscan_instance(seed, nb=2, nt=5, nd=3, nn=4):
    r = _rng(seed)
    return {
        "a": -r.uniform(0.2, 2.0, size=(nd, nn)),
        "delta": r.uniform(0.05, 0.8, size=(nb, nt, nd)),
        "b_seq": r.normal(size=(nb, nt, nn)),
        "c_seq": r.normal(size=(nb, nt, nn)),
        "u": r.normal(size=(nb, nt, nd)),
        "d_skip": r.normal(size=(nd,)),
    }


def _sscan_composed(g, t, nb, nt, nd, nn):
    """The same readout built from elementwise ops plus the plain scan."""
    da = t["delta"].reshape(nb, nt, nd, 1) * t["a"]
    abar = ad.exp(da)
    bbar = ad.expm1x(da) * t["delta"].reshape(nb, nt, nd, 1) * t["b_seq"].reshape(
        nb, nt, 1, nn
    )
    return ad.selective_scan_op(abar, bbar, t["c_seq"], t["u"], t["d_skip"])


def test_sscan_matches_composed_pipeline():
    leaves = _sscan_instance(14)
    nb, nt, nd = leaves["delta"].shape
    nn = leaves["b_seq"].shape[2]

    g1 = Graph()
    t1 = {k: g1.leaf(k, v) for k, v in leaves.items()}
    fused = ad.sscan(t1["a"], t1["delta"], t1["b_seq"], t1["c_seq"], t1["u"], t1["d_skip"])
    g1.set_output(fused.total())

    g2 = Graph()
    t2 = {k: g2.leaf(k, v) for k, v in leaves.items()}
    composed = _sscan_composed(g2, t2, nb, nt, nd, nn)
    g2.set_output(composed.total())

    assert np.allclose(fused.value, composed.value, atol=1e-12)
    ga, gb = g1.gradient(), g2.gradient()
    for name in leaves:
        assert np.allclose(ga[name], gb[name], atol=1e-10), name


def test_sscan_fd():
    leaves = _sscan_instance(15)
    _fd(
        lambda g, t: ad.sscan(
            t["a"], t["delta"], t["b_seq"], t["c_seq"], t["u"], t["d_skip"]
        ).total(),
        leaves,
        tol=1e-5,
        max_coords=120,
    )


def test_sscan_weighted_output_fd():
    # a non-uniform cotangent exercises the reverse recurrence coupling
    leaves = _sscan_instance(16, nb=1, nt=4, nd=2, nn=2)
    r = _rng(17)
    wts = r.normal(size=(1, 4, 2))

    def build(g, t):
        return (
            ad.sscan(t["a"], t["delta"], t["b_seq"], t["c_seq"], t["u"], t["d_skip"])
            * g.constant(wts)
        ).total()

    _fd(build, leaves, tol=1e-5, max_coords=10_000)


# -- graph mechanics -----------------------------------------------------------


def test_duplicate_leaf_rejected():
    g = Graph()
    g.leaf("a", np.ones(2))
    with pytest.raises(GraphError, match="duplicate leaf"):
        g.leaf("a", np.ones(2))


def test_cross_graph_operands_rejected():
    g1, g2 = Graph(), Graph()
    a = g1.leaf("a", np.ones(2))
    b = g2.leaf("b", np.ones(2))
    with pytest.raises(GraphError, match="different graphs"):
        a + b
    with pytest.raises(GraphError, match="different graph"):
        g1.set_output(b.total())


def test_gradient_requires_scalar_output():
    g = Graph()
    a = g.leaf("a", np.ones((2, 2)))
    with pytest.raises(GraphError, match="no output set"):
        g.gradient()
    g.set_output(a + a)
    with pytest.raises(GraphError, match="not scalar"):
        g.gradient()


def test_leaf_value_lookup():
    g = Graph()
    arr = np.arange(3.0)
    g.leaf("a", arr)
    assert np.array_equal(g.leaf_value("a"), arr)
    with pytest.raises(GraphError, match="no leaf named"):
        g.leaf_value("missing")


def test_constants_get_no_gradient():
    g = Graph()
    a = g.leaf("a", np.full(3, 2.0))
    c = g.constant(np.full(3, 5.0))
    g.set_output((a * c).total())
    grads = g.gradient()
    assert set(grads) == {"a"}
    assert np.array_equal(grads["a"], np.full(3, 5.0))


def test_recompute_is_pure_replay():
    r = _rng(18)
    a = r.normal(size=(3,))
    b = r.normal(size=(3,))
    g = Graph()
    ta, tb = g.leaf("a", a), g.leaf("b", b)
    out = (ad.exp(ta) * tb).total()
    g.set_output(out)
    base = float(out.value)

    shifted = g.recompute({"a": a + 1.0})
    assert np.isclose(float(shifted), float(np.sum(np.exp(a + 1.0) * b)))
    # replay must not disturb stored values
    assert float(out.value) == base
    assert np.array_equal(g.leaf_value("a"), a)
    assert float(g.recompute()) == base


def test_gradient_accumulates_over_reuse():
    g = Graph()
    a = g.leaf("a", np.array([3.0]))
    out = (a * a + a).total()  # d/da = 2a + 1 = 7
    g.set_output(out)
    assert np.allclose(g.gradient()["a"], [7.0])
