import numpy as np
import pytest
from gradcheck import OPS, check_op
from hypothesis import given, settings
from hypothesis import strategies as st

from ndp import autodiff as ad
from ndp.autodiff import AdamState, ContractError, SamplingError, ShapeError, Tape, adam_step

TOL = 1e-4


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    op, arrays = OPS[name]
    assert check_op(op, arrays) < TOL


def test_minimum_tie_sends_gradient_to_first_argument():
    tape = Tape()
    a, b = tape.leaf([1.0, 2.0]), tape.leaf([1.0, 3.0])
    grads = tape.backward(ad.sum(ad.minimum(a, b)))
    assert np.array_equal(grads[a], [1.0, 1.0])
    assert np.array_equal(grads[b], [0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_composite_expression_gradients(n, k, m, seed):
    r = np.random.default_rng(seed)
    x, w, b = r.standard_normal((n, k)), r.standard_normal((k, m)), r.standard_normal((1, m))

    def net(x, w, b):
        return ad.log_softmax(ad.tanh(x @ w + b) * ad.sigmoid(x @ w))

    assert check_op(net, [x, w, b], seed) < TOL


def test_gradients_accumulate_over_reuse():
    tape = Tape()
    x = tape.leaf(3.0)
    grads = tape.backward(x * x + x)
    assert grads[x] == pytest.approx(7.0)


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x, y = tape.leaf([1.0, 2.0]), tape.leaf([5.0])
    grads = tape.backward(ad.sum(x))
    assert np.array_equal(grads[y], [0.0])


def test_constants_and_frozen_leaves_have_no_gradient():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    frozen = tape.leaf([3.0, 4.0], trainable=False)
    grads = tape.backward(ad.sum(x * frozen))
    assert frozen not in grads
    assert np.array_equal(grads[x], [3.0, 4.0])


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        tape.backward(ad.tanh(x))


def test_backward_twice_gives_same_gradients():
    tape = Tape()
    x = tape.leaf([0.5, -1.0])
    loss = ad.sum(ad.tanh(x) * x)
    g1 = tape.backward(loss)[x].copy()
    g2 = tape.backward(loss)[x]
    assert np.array_equal(g1, g2)


@pytest.mark.parametrize("fn", [
    lambda t: ad.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3)))),
    lambda t: ad.add(t.leaf(np.ones((2, 3))), t.leaf(np.ones((4, 3)))),
    lambda t: ad.concat([t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 2)))], axis=0),
    lambda t: ad.mse(t.leaf(np.ones(3)), np.ones(4)),
    lambda t: ad.softmax_cross_entropy(t.leaf(np.ones((2, 3))), [0, 1, 2]),
    lambda t: ad.scatter_add_rows(t.leaf(np.ones((2, 3))), [0], 3),
])
def test_shape_errors(fn):
    with pytest.raises(ShapeError):
        fn(Tape())


def test_log_softmax_is_stable_for_large_logits():
    tape = Tape()
    y = ad.log_softmax(tape.leaf([[1000.0, 0.0, -1000.0]]))
    assert np.all(np.isfinite(y.value))
    assert y.value[0, 0] == pytest.approx(0.0)


def test_sample_categorical_frequencies():
    r = np.random.default_rng(1)
    p = np.array([0.1, 0.0, 0.6, 0.3])
    draws = np.bincount([ad.sample_categorical(p, r) for _ in range(20000)], minlength=4) / 20000
    assert draws[1] == 0
    assert np.allclose(draws, p, atol=0.015)


def test_sample_categorical_never_picks_trailing_zero():
    r = np.random.default_rng(2)
    p = np.array([0.5, 0.5, 0.0])
    assert all(ad.sample_categorical(p, r) < 2 for _ in range(2000))


@pytest.mark.parametrize("probs", [[0.0, 0.0], [0.5, -0.1], [np.nan, 1.0]])
def test_sample_categorical_rejects_bad_probabilities(probs):
    with pytest.raises(SamplingError):
        ad.sample_categorical(np.array(probs), np.random.default_rng(0))


def test_adam_first_step_moves_by_learning_rate():
    # bias correction makes the first update -lr * g / (|g| + eps)
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.3, -4.0, 0.0])}
    state = AdamState(lr=0.01)
    adam_step(state, params, grads)
    assert np.allclose(params["w"], [0.99, -1.99, 0.5], atol=1e-7)


def test_adam_matches_reference_recursion():
    r = np.random.default_rng(3)
    p = {"w": r.standard_normal(5)}
    ref = p["w"].copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = AdamState(lr=0.05)
    for t in range(1, 21):
        g = r.standard_normal(5)
        adam_step(state, p, {"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"], ref, atol=1e-12)


def test_adam_minimizes_quadratic():
    p = {"w": np.array([3.0, -2.0])}
    state = AdamState(lr=0.1)
    for _ in range(500):
        adam_step(state, p, {"w": 2 * p["w"]})
    assert np.abs(p["w"]).max() < 1e-2


def test_adam_rejects_mismatched_gradient():
    with pytest.raises(ShapeError):
        adam_step(AdamState(), {"w": np.zeros(3)}, {"w": np.zeros(2)})
