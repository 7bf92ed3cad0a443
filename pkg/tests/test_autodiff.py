import numpy as np
import pytest

from constrainedgen import autodiff as ad


def graph_of(build, names):
    return ad.DiffGraph(build, input_names=names)


def test_forward_square():
    g = graph_of(lambda lv: ad.mul(lv["x"], lv["x"]), ["x"])
    assert g.forward(x=3.0) == pytest.approx(9.0)


def test_forward_ln_exp_inverse_pair():
    g = graph_of(lambda lv: ad.ln(ad.exp(lv["x"])), ["x"])
    assert g.forward(x=1.5) == pytest.approx(1.5)


def test_softplus_at_zero_is_ln2():
    g = graph_of(lambda lv: ad.softplus(lv["x"]), ["x"])
    assert g.forward(x=0.0) == pytest.approx(np.log(2.0), abs=1e-12)


def test_backward_square():
    g = graph_of(lambda lv: ad.mul(lv["x"], lv["x"]), ["x"])
    g.forward(x=3.0)
    assert g.backward(np.asarray(1.0))["x"] == pytest.approx(6.0)


def test_backward_log_sigmoid_at_zero():
    # d/dx (-ln(1 + e^{-x})) = sigmoid(-x); at 0 -> 0.5
    g = graph_of(lambda lv: ad.neg(ad.softplus(ad.neg(lv["x"]))), ["x"])
    g.forward(x=0.0)
    assert g.backward(np.asarray(1.0))["x"] == pytest.approx(0.5)


def test_backward_before_forward_raises():
    g = graph_of(lambda lv: lv["x"], ["x"])
    with pytest.raises(RuntimeError):
        g.backward(np.asarray(1.0))


def test_unbound_input_raises():
    g = graph_of(lambda lv: lv["x"], ["x"])
    with pytest.raises(ValueError, match="unbound"):
        g.forward(y=1.0)


def test_identity_graph_adjoint_is_one():
    g = graph_of(lambda lv: lv["x"], ["x"])
    g.forward(x=np.array([2.0, 5.0]))
    np.testing.assert_allclose(g.backward(np.ones(2))["x"], [1.0, 1.0])


def test_seed_shape_mismatch_raises():
    g = graph_of(lambda lv: lv["x"], ["x"])
    g.forward(x=np.zeros(3))
    with pytest.raises(ValueError, match="seed shape"):
        g.backward(np.ones(4))


def test_affine_shape_mismatch_raises():
    with pytest.raises(ValueError, match="affine shape"):
        ad.affine(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))


def test_mlp_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    w1 = rng.standard_normal((3, 4))
    b1 = rng.standard_normal(4)
    w2 = rng.standard_normal((4, 2))

    def build(lv):
        h = ad.tanh(ad.affine(lv["x"], ad.Tensor(w1), ad.Tensor(b1)))
        return ad.affine(h, ad.Tensor(w2))

    g = graph_of(build, ["x"])
    report = ad.grad_check(g, {"x": rng.standard_normal((2, 3))}, h=1e-5, tol=1e-4)
    assert report.passed, report.max_rel_error


def test_grad_check_linear_is_exact():
    g = graph_of(lambda lv: ad.mul(lv["x"], 3.0), ["x"])
    report = ad.grad_check(g, {"x": np.array([1.0, -2.0])}, h=1e-4, tol=1e-10)
    assert report.passed
    assert report.max_rel_error < 1e-10


def test_grad_check_exp():
    g = graph_of(lambda lv: ad.exp(lv["x"]), ["x"])
    report = ad.grad_check(g, {"x": np.array(1.0)}, h=1e-5, tol=1e-6)
    assert report.passed


def test_grad_check_warns_on_huge_values():
    g = graph_of(lambda lv: ad.mul(lv["x"], 1e9), ["x"])
    with pytest.warns(UserWarning, match="ill-conditioned"):
        ad.grad_check(g, {"x": np.array(1.0)}, h=1e-5, tol=1.0)


def test_grad_check_nonfinite_raises():
    g = graph_of(lambda lv: ad.ln(lv["x"]), ["x"])
    with pytest.raises(FloatingPointError):
        ad.grad_check(g, {"x": np.array(-1.0)})


def test_max_min_gradient_routing_and_ties():
    a, b = ad.Tensor(np.array([1.0, 2.0, 3.0])), ad.Tensor(np.array([2.0, 2.0, 1.0]))
    out = ad.sum_reduce(ad.maximum(a, b))
    out.backward(np.asarray(1.0))
    np.testing.assert_allclose(a.grad, [0.0, 1.0, 1.0])  # tie at index 1 -> first arg
    np.testing.assert_allclose(b.grad, [1.0, 0.0, 0.0])

    a2, b2 = ad.Tensor(np.array([1.0, 2.0, 3.0])), ad.Tensor(np.array([2.0, 2.0, 1.0]))
    out = ad.sum_reduce(ad.minimum(a2, b2))
    out.backward(np.asarray(1.0))
    np.testing.assert_allclose(a2.grad, [1.0, 1.0, 0.0])
    np.testing.assert_allclose(b2.grad, [0.0, 0.0, 1.0])


def test_broadcast_backward_unbroadcasts():
    a = ad.Tensor(np.array([[1.0], [2.0]]))  # (2, 1)
    b = ad.Tensor(np.array([10.0, 20.0, 30.0]))  # (3,)
    out = ad.sum_reduce(ad.add(a, b))
    out.backward(np.asarray(1.0))
    np.testing.assert_allclose(a.grad, [[3.0], [3.0]])
    np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])


def test_select_columns_scatter():
    x = ad.Tensor(np.arange(6, dtype=float).reshape(2, 3))
    out = ad.sum_reduce(ad.select_columns(x, [2, 2, 0]))
    out.backward(np.asarray(1.0))
    np.testing.assert_allclose(x.grad, [[1.0, 0.0, 2.0], [1.0, 0.0, 2.0]])


def test_linearity_of_backward():
    # backward(a*f + b*g) == a*backward(f) + b*backward(g) on shared leaves
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal(4)

    def grad_of(build):
        g = graph_of(build, ["x"])
        val = g.forward(x=x0)
        return g.backward(np.ones_like(val))["x"]

    f = lambda lv: ad.exp(lv["x"])
    h = lambda lv: ad.tanh(lv["x"])
    combo = lambda lv: ad.add(ad.mul(f(lv), 2.0), ad.mul(h(lv), -3.0))
    np.testing.assert_allclose(grad_of(combo), 2.0 * grad_of(f) - 3.0 * grad_of(h), rtol=1e-15)


def test_determinism_bit_identical():
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((3, 3))

    def run():
        g = graph_of(lambda lv: ad.sum_reduce(ad.softplus(ad.affine(lv["x"], ad.Tensor(np.eye(3))))), ["x"])
        v = g.forward(x=x0)
        return v, g.backward(np.ones_like(v))["x"]

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


def _random_graph(rng, depth):
    """Random composition of smooth primitives for chain-rule checks."""
    unary = [ad.tanh, ad.softplus, lambda t: ad.mul(t, 0.5), ad.neg, lambda t: ad.exp(ad.mul(t, 0.3))]
    picks = [unary[rng.integers(len(unary))] for _ in range(depth)]

    def build(lv):
        t = lv["x"]
        for op in picks:
            t = op(t)
        return ad.sum_reduce(t)

    return build


def test_chain_rule_on_random_compositions():
    rng = np.random.default_rng(42)
    for _ in range(100):
        depth = int(rng.integers(1, 7))
        g = graph_of(_random_graph(rng, depth), ["x"])
        x = rng.standard_normal(3)
        report = ad.grad_check(g, {"x": x}, h=1e-5, tol=1e-3)
        assert report.passed, f"depth={depth} err={report.max_rel_error}"
