import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sbs import autodiff as ad
from sbs.autodiff import GradArityError, ShapeError, Var


def fd_check(f, x, atol=1e-6):
    """Reverse-mode gradient of a scalar program vs central differences."""
    v = ad.parameter(x)
    (g,) = ad.grad(f(v), [v])
    num = ad.numerical_grad(lambda a: float(f(ad.constant(a)).value), x)
    np.testing.assert_allclose(g, num, atol=atol)


def test_identity_and_square():
    out, _ = ad.forward_graph([3.0], lambda a: a)
    assert out.value == 3.0
    y, (x,) = ad.forward_graph([2.0], lambda a: ad.mul(a, a))
    assert y.value == 4.0
    assert ad.grad(y, [x])[0] == pytest.approx(4.0)


def test_forward_graph_rejects_non_finite_inputs():
    with pytest.raises(ValueError):
        ad.forward_graph([np.array([1.0, np.nan])], ad.sum)


def test_bilinear():
    w, x = ad.parameter(3.0), ad.parameter(2.0)
    g = ad.backward(ad.mul(w, x))
    assert g[w] == 2.0 and g[x] == 3.0


def test_constant_root_gives_zero_gradients():
    w = ad.parameter(np.ones(3))
    g = ad.backward(ad.constant(5.0), [w])
    np.testing.assert_array_equal(g[w], np.zeros(3))


def test_non_scalar_root_rejected():
    with pytest.raises(ShapeError):
        ad.backward(ad.parameter(np.ones(3)))


def test_sum_sigmoid_matches_finite_differences(rng):
    fd_check(lambda v: ad.sum(ad.sigmoid(v)), rng.uniform(-2, 2, 5))


def test_two_layer_composition(rng):
    W1, W2 = rng.normal(size=(4, 3)), rng.normal(size=(2, 4))
    x = rng.normal(size=(5, 3))

    def f(w):
        h = ad.tanh(ad.matmul(x, ad.transpose(ad.reshape(w, (4, 3)))))
        return ad.mean(ad.square(ad.matmul(h, W2.T)))

    fd_check(f, W1.reshape(-1))


UNARY = {
    "neg": ad.neg, "square": ad.square, "exp": ad.exp, "sigmoid": ad.sigmoid, "tanh": ad.tanh,
    "abs": ad.abs, "relu": ad.relu, "sqrt_shift": lambda a: ad.sqrt(ad.add(a, 3.0)),
    "log_shift": lambda a: ad.log(ad.add(a, 3.0)), "clip": lambda a: ad.clip(a, -1.0, 1.0),
    "softmax": lambda a: ad.mul(ad.softmax(a), np.arange(1.0, 7.0)),
    "log_softmax": lambda a: ad.mul(ad.log_softmax(a), np.arange(1.0, 7.0)),
    "transpose": lambda a: ad.mul(ad.transpose(ad.reshape(a, (2, 3))), np.arange(6.0).reshape(3, 2)),
    "getitem": lambda a: ad.getitem(a, np.array([0, 2, 2, 5])),
    "concat": lambda a: ad.mul(ad.concat([a, ad.square(a)]), np.arange(12.0)),
    "stack": lambda a: ad.mul(ad.stack([a, ad.exp(a)]), np.ones((2, 6)) * 0.5),
    "mean_axis": lambda a: ad.mean(ad.reshape(ad.square(a), (2, 3)), axis=0),
    "div": lambda a: ad.div(a, ad.add(ad.square(a), 1.0)),
    "maximum": lambda a: ad.maximum(a, ad.mul(a, 0.3)),
    "where": lambda a: ad.where(np.array([1, 0, 1, 0, 1, 0], bool), ad.square(a), ad.exp(a)),
}


def _away_from_kinks(x):
    # abs/relu/clip/maximum are non-differentiable at 0 and +-1
    return np.where(np.minimum(np.abs(x), np.abs(np.abs(x) - 1.0)) < 1e-3, 0.37, x)


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(x=arrays(np.float64, 6, elements=st.floats(-2, 2)))
def test_builtin_ops_match_finite_differences(name, x):
    fd_check(lambda v: ad.sum(UNARY[name](v)), _away_from_kinks(x))


def test_cross_entropy_gradient(rng):
    labels = np.array([0, 2, 1, 2])
    fd_check(lambda v: ad.cross_entropy(ad.reshape(v, (4, 3)), labels), rng.normal(size=12))


def test_cross_entropy_value():
    logits = np.log(np.array([[0.25, 0.75]]))
    assert ad.cross_entropy(ad.constant(logits), np.array([1])).value == pytest.approx(-np.log(0.75))


def test_fan_out_accumulates():
    x = ad.parameter(1.5)
    y = ad.add(ad.mul(x, 2.0), ad.square(x))
    assert ad.grad(y, [x])[0] == pytest.approx(2.0 + 3.0)


def test_determinism(rng):
    x = rng.normal(size=(3, 4))

    def run():
        v = ad.parameter(x)
        return ad.grad(ad.sum(ad.sigmoid(ad.matmul(v, ad.transpose(v)))), [v])[0]

    assert run().tobytes() == run().tobytes()


def test_shape_mismatch_names_the_op():
    with pytest.raises(ShapeError, match="add"):
        ad.add(ad.constant(np.ones(3)), ad.constant(np.ones(4)))
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_scalar_broadcast_allowed():
    v = ad.parameter(np.arange(3.0))
    assert ad.grad(ad.sum(ad.mul(2.0, v)), [v])[0].tolist() == [2.0, 2.0, 2.0]


def test_custom_round_with_identity_backward():
    rnd = ad.register_custom_grad(lambda x: np.ceil(x - 0.5), lambda inputs, g: (g,), name="round_ste")
    x = ad.parameter(0.7)
    y = rnd(x)
    assert y.value == 1.0
    assert ad.grad(y, [x])[0] == 1.0


def test_custom_op_equal_to_builtin():
    sq = ad.register_custom_grad(lambda x: x * x, lambda inputs, g: (2 * inputs[0] * g,))
    x = np.array([0.3, -1.2, 2.0])
    a, b = ad.parameter(x), ad.parameter(x)
    np.testing.assert_array_equal(ad.grad(ad.sum(sq(a)), [a])[0], ad.grad(ad.sum(ad.square(b)), [b])[0])


def test_custom_op_arity_mismatch_detected_at_build():
    bad = ad.register_custom_grad(lambda a, b: a + b, lambda inputs, g: (g,))
    with pytest.raises(GradArityError):
        bad(ad.parameter(1.0), ad.parameter(2.0))


def test_values_are_immutable():
    v = Var(np.ones(2))
    with pytest.raises(ValueError):
        v.value[0] = 3.0
