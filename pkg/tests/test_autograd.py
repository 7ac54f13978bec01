import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybrid_ids import autograd as ag
from hybrid_ids.autograd import Tape, Tensor


def leaf(values):
    return Tensor(np.array(values, dtype=float), requires_grad=True)


def grad_of(build, *params):
    """Reverse-mode grads of scalar build() plus a closure for finite differences."""
    with Tape() as tape:
        out = build()
    tape.backward(out)

    def value():
        return build().item()

    return [p.grad.copy() for p in params], value


def check_grads(build, *params, tol=1e-6):
    grads, value = grad_of(build, *params)
    for p, g in zip(params, grads):
        num = ag.numeric_grad(value, p)
        assert ag.relative_error(g, num) < tol, p


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    out = ag.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.values, [[1, 2], [3, 4]])


def test_matmul_orthogonal():
    out = ag.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]]))
    assert out.values.tolist() == [[0.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ag.matmul(Tensor(a), Tensor(b)).values, ref, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grads_plain_and_batched(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    check_grads(lambda: ag.sum_all(ag.mul(ag.matmul(a, b), ag.matmul(a, b))), a, b)
    x = leaf(rng.normal(size=(2, 3, 4)))
    check_grads(lambda: ag.square_sum(ag.matmul(x, b)), x, b)
    y = leaf(rng.normal(size=(2, 4, 3)))
    check_grads(lambda: ag.square_sum(ag.matmul(x, y)), x, y)


def test_spmm_grad_matches_dense(rng):
    A = sp.random(5, 5, density=0.4, random_state=1, format="csr")
    x = leaf(rng.normal(size=(5, 3)))
    np.testing.assert_allclose(ag.spmm(A, x).values, A.toarray() @ x.values, atol=1e-14)
    check_grads(lambda: ag.square_sum(ag.spmm(A, x)), x)


# ------------------------------------------------------------------ elementwise

def test_sigmoid_zero_and_relu_values():
    assert ag.sigmoid(Tensor([0.0])).values[0] == 0.5
    assert ag.tanh(Tensor([0.0])).values[0] == 0.0
    x = leaf([-3.0])
    with Tape() as tape:
        y = ag.sum_all(ag.relu(x))
    tape.backward(y)
    assert y.item() == 0.0 and x.grad[0] == 0.0


def test_tanh_grad_vs_finite_difference():
    x = leaf([0.7])
    grads, value = grad_of(lambda: ag.sum_all(ag.tanh(x)), x)
    num = ag.numeric_grad(value, x, h=1e-6)
    assert ag.relative_error(grads[0], num) < 1e-6
    assert math.isclose(grads[0][0], 1 - math.tanh(0.7) ** 2, rel_tol=1e-14)


def test_sigmoid_extreme_inputs_stay_finite():
    s = ag.sigmoid(Tensor([-800.0, 800.0])).values
    assert s.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("op", [ag.add, ag.sub, ag.mul])
def test_binary_grads_with_broadcast(op, rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4,)))
    check_grads(lambda: ag.square_sum(op(a, b)), a, b)


def test_binary_shape_mismatch():
    with pytest.raises(ag.ShapeError):
        ag.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


@pytest.mark.parametrize("fn", [ag.sigmoid, ag.tanh, ag.relu])
def test_unary_grads(fn, rng):
    x = leaf(rng.normal(size=(3, 3)) + 0.05)
    check_grads(lambda: ag.square_sum(fn(x)), x)


def test_log_mean_pick_grads(rng):
    x = leaf(rng.random((4, 3)) + 0.5)
    idx = np.array([0, 2, 1, 1])
    check_grads(lambda: ag.mean(ag.log(ag.pick(x, idx))), x)
    check_grads(lambda: ag.square_sum(ag.mean(x, axis=0)), x)


def test_shape_plumbing_grads(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(4, 3, 2)))
    check_grads(lambda: ag.sum_all(ag.mul(ag.transpose(x, (2, 1, 0)), w)), x)
    check_grads(lambda: ag.square_sum(ag.reshape(x, (6, 4))), x)
    y = leaf(rng.normal(size=(2, 3, 2)))
    wc = Tensor(rng.normal(size=(2, 3, 6)))
    check_grads(lambda: ag.sum_all(ag.mul(ag.concat([x, y], axis=-1), wc)), x, y)
    coef = Tensor(rng.normal(size=(3, 2, 4)))

    def stacked():
        parts = ag.unstack(x, axis=1)
        return ag.sum_all(ag.mul(ag.stack(parts[::-1], axis=0), coef))

    check_grads(stacked, x)

    def split():
        a, b = ag.split(x, [1, 3], axis=-1)
        return ag.add(ag.square_sum(a), ag.sum_all(ag.tanh(b)))

    check_grads(split, x)


def test_gather_rows_accumulates_repeats():
    x = leaf(np.arange(6.0).reshape(3, 2))
    with Tape() as tape:
        y = ag.sum_all(ag.gather_rows(x, [0, 0, 2]))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


# ------------------------------------------------------------------ softmax

def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).values, [[1 / 3] * 3], atol=1e-15)
    s = ag.softmax_rows(Tensor([[1000.0, 0.0]])).values
    assert np.isfinite(s).all() and s[0, 0] == 1.0 and s[0, 1] < 1e-300
    row = np.array([1.0, 2.0, 3.0])
    direct = np.exp(row - 3.0) / np.exp(row - 3.0).sum()
    np.testing.assert_allclose(ag.softmax_rows(Tensor([row])).values[0], direct, rtol=0, atol=1e-12)


def test_softmax_grad(rng):
    x = leaf(rng.normal(size=(3, 5)))
    w = Tensor(rng.normal(size=(3, 5)))
    check_grads(lambda: ag.sum_all(ag.mul(ag.softmax_rows(x), w)), x)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ag.NumericError):
        ag.softmax_rows(Tensor([[np.nan, 0.0]]))


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                     elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.randoms(use_true_random=False))
def test_softmax_rows_sum_and_permutation(x, rnd):
    s = ag.softmax_rows(Tensor(x)).values
    assert (s >= 0).all()
    assert np.abs(s.sum(axis=1) - 1.0).max() < 1e-12
    perm = list(range(x.shape[1]))
    rnd.shuffle(perm)
    # the row sum may associate differently, so allow one rounding step
    np.testing.assert_allclose(ag.softmax_rows(Tensor(x[:, perm])).values, s[:, perm], rtol=1e-15, atol=1e-16)


# ------------------------------------------------------------------ dropout

def test_dropout_identity_cases(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert ag.dropout(x, 0.0, True, rng) is x
    assert ag.dropout(x, 0.3, False) is x


def test_dropout_mean_within_three_sigma():
    rng = np.random.default_rng(7)
    n, rate = 10 ** 5, 0.3
    out = ag.dropout(Tensor(np.ones(n)), rate, True, rng).values
    # each entry is 1/(1-p) with prob 1-p, else 0: var = p/(1-p)
    sigma = math.sqrt(rate / (1 - rate) / n)
    assert abs(out.mean() - 1.0) < 3 * sigma
    assert set(np.unique(out)) <= {0.0, 1 / (1 - rate)}


def test_dropout_rate_validation(rng):
    with pytest.raises(ValueError):
        ag.dropout(Tensor([1.0]), 1.0, True, rng)


# ------------------------------------------------------------------ batchnorm

def test_batchnorm_standardized_input_passes_through():
    x = np.array([[1.0, -1.0], [-1.0, 1.0]])
    state = ag.BatchNormState(2)
    out = ag.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, state).values
    # eps = 1e-5 shrinks unit-variance input by 1/sqrt(1 + eps), a gap of ~5e-6
    np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-5), rtol=0, atol=1e-15)
    assert np.abs(out - x).max() < 1e-5


def test_batchnorm_constant_column_goes_to_zero():
    x = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    out = ag.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, ag.BatchNormState(2)).values
    assert np.all(out[:, 0] == 0.0)


def test_batchnorm_statistics_oracle(rng):
    x = rng.normal(3.0, 2.5, size=(64, 3))
    x[:, 2] *= 0.001                     # tiny variance: eps matters
    out = ag.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), True, ag.BatchNormState(3)).values
    var = x.var(axis=0)
    assert np.abs(out.mean(axis=0)).max() < 1e-12
    # population variance of the output is var / (var + eps), exactly 1 only as eps/var -> 0
    np.testing.assert_allclose(out.var(axis=0), var / (var + 1e-5), rtol=1e-10)
    assert abs(out.var(axis=0)[0] - 1.0) < 1e-5


def test_batchnorm_running_stats_and_infer():
    state = ag.BatchNormState(1)
    x = np.array([[1.0], [3.0]])
    ag.batchnorm(Tensor(x), Tensor([1.0]), Tensor([0.0]), True, state)
    assert state.mean[0] == pytest.approx(0.1 * 2.0)
    assert state.var[0] == pytest.approx(0.9 + 0.1 * 2.0)     # unbiased batch variance = 2
    out = ag.batchnorm(Tensor([[0.2]]), Tensor([2.0]), Tensor([1.0]), False, state).values
    assert out[0, 0] == pytest.approx(1.0)


def test_batchnorm_single_row_train_errors():
    with pytest.raises(ag.ShapeError):
        ag.batchnorm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, ag.BatchNormState(2))


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_grads(train, rng):
    x = leaf(rng.normal(size=(6, 3)))
    gamma, beta = leaf(rng.random(3) + 0.5), leaf(rng.normal(size=3))
    w = Tensor(rng.normal(size=(6, 3)))
    state = ag.BatchNormState(3)
    state.mean, state.var = rng.normal(size=3), rng.random(3) + 0.5

    def build():
        saved = (state.mean.copy(), state.var.copy())
        out = ag.sum_all(ag.mul(ag.batchnorm(x, gamma, beta, train, state), w))
        state.mean, state.var = saved
        return out

    check_grads(build, x, gamma, beta)


# ------------------------------------------------------------------ LSTM sequence op

@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_sequence_grads(reverse, rng):
    xproj = leaf(rng.normal(size=(4, 2, 12)))
    Wh = leaf(rng.normal(size=(3, 12)) * 0.5)
    w = Tensor(rng.normal(size=(4, 2, 3)))
    check_grads(lambda: ag.sum_all(ag.mul(ag.lstm_sequence(xproj, Wh, reverse), w)), xproj, Wh)


def test_lstm_sequence_shape_errors():
    with pytest.raises(ag.ShapeError):
        ag.lstm_sequence(Tensor(np.zeros((3, 2, 10))), Tensor(np.zeros((3, 12))))


# ------------------------------------------------------------------ backward contract

def test_backward_sum_gives_ones(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    with Tape() as tape:
        y = ag.sum_all(x)
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_product_of_scalars():
    x, y = leaf(3.0), leaf(-2.0)
    with Tape() as tape:
        z = ag.mul(x, y)
    tape.backward(z)
    assert x.grad == -2.0 and y.grad == 3.0


def test_unreached_leaf_gets_zero_grad():
    x, y = leaf([1.0, 2.0]), leaf([5.0])
    with Tape() as tape:
        _ = ag.mul(y, y)
        z = ag.sum_all(x)
    tape.backward(z)
    np.testing.assert_array_equal(y.grad, [0.0])


def test_backward_errors():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ag.scale(x, 2.0)
    with pytest.raises(ag.ShapeError):
        tape.backward(y)
    with pytest.raises(ag.TapeError):
        Tape().backward(ag.sum_all(Tensor([1.0])))
    with pytest.raises(ag.TapeError):
        ag.backward(Tensor(1.0))


def test_tape_single_use_then_reset():
    x = leaf([1.0])
    with Tape() as tape:
        y = ag.sum_all(ag.mul(x, x))
    tape.backward(y)
    with pytest.raises(ag.TapeError):
        tape.backward(y)
    tape.reset()
    with tape:
        y = ag.sum_all(ag.mul(x, x))
    tape.backward(y)
    assert x.grad[0] == 2.0


def test_tape_order_and_dump():
    x = leaf([[1.0, 2.0]])
    with Tape() as tape:
        h = ag.tanh(ag.matmul(x, Tensor(np.ones((2, 2)))))
        ag.sum_all(h)
    produced = set()
    for op in tape.ops:
        for t in op.inputs:
            assert not t.requires_grad or t is x or id(t) in produced
        produced.update(id(o) for o in op.outputs)
    text = tape.dump()
    assert "matmul" in text and "(1, 2)" in text


def test_no_recording_outside_tape():
    x = leaf([1.0])
    y = ag.mul(x, x)
    assert not y.requires_grad


def test_overflow_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(ag.NumericError):
        ag.mul(Tensor([1e200]), Tensor([1e200]))


def test_determinism_same_seed(rng):
    def run(seed):
        r = np.random.default_rng(seed)
        x = Tensor(np.arange(12.0).reshape(3, 4))
        return ag.softmax_rows(ag.dropout(x, 0.5, True, r)).values

    np.testing.assert_array_equal(run(3), run(3))


def test_composed_graph_gradient_soundness(rng):
    # a small mixed graph (<200 parameters) exercising most primitives together
    W1 = leaf(rng.normal(size=(4, 5)) * 0.5)
    W2 = leaf(rng.normal(size=(5, 3)) * 0.5)
    b = leaf(rng.normal(size=3))
    x = Tensor(rng.normal(size=(6, 4)))
    labels = np.array([0, 1, 2, 0, 1, 2])

    def build():
        h = ag.tanh(ag.matmul(x, W1))
        h = ag.mul(h, ag.sigmoid(h))
        p = ag.softmax_rows(ag.add(ag.matmul(h, W2), b))
        return ag.add(ag.scale(ag.mean(ag.log(ag.pick(p, labels))), -1.0), ag.scale(ag.square_sum(W1), 1e-3))

    grads, value = grad_of(build, W1, W2, b)
    for p, g in zip((W1, W2, b), grads):
        assert ag.relative_error(g, ag.numeric_grad(value, p, h=1e-5)) < 1e-4
