import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from stket import tensor as T
from stket.gradcheck import OP_CASES, TOLERANCE
from stket.tensor import ContractError, ShapeError, Tape, Tensor, finite_diff_check

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradient_matches_finite_differences(name, seed):
    f, x = OP_CASES[name](np.random.default_rng(seed))
    assert finite_diff_check(f, x) <= TOLERANCE


def test_forward_values_match_numpy(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b)
    np.testing.assert_allclose(T.sigmoid(Tensor(a)).data, 1 / (1 + np.exp(-a)))
    np.testing.assert_allclose(T.relu(Tensor(a)).data, np.maximum(a, 0))
    np.testing.assert_allclose(T.concat([Tensor(a), Tensor(a)], axis=0).data, np.vstack([a, a]))
    np.testing.assert_allclose(T.permute(Tensor(a.reshape(3, 2, 2)), (2, 0, 1)).data,
                               a.reshape(3, 2, 2).transpose(2, 0, 1))


def test_sigmoid_is_stable_at_extremes():
    out = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = T.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matmul_gradient_is_closed_form(n, k, m, seed):
    r = np.random.default_rng(seed)
    a, b, g = leaf(r.normal(size=(n, k))), leaf(r.normal(size=(k, m))), r.normal(size=(n, m))
    with Tape() as tape:
        loss = T.sum_all(T.mul(a @ b, Tensor(g)))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        T.softmax_rows(Tensor([[0.0, np.nan]]))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_backward_needs_scalar():
    x = leaf(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_unreachable_leaf_gets_zero_gradient():
    x, unused = leaf([1.0, 2.0]), leaf([3.0])
    with Tape() as tape:
        loss = T.sum_all(x * 3.0)
        _ = unused * 2.0
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_gradients_accumulate_over_reuse():
    x = leaf([2.0])
    with Tape() as tape:
        loss = T.sum_all(T.mul(x, x) + x)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [5.0])


def test_no_tape_means_no_graph():
    y = leaf([1.0]) * 2.0
    assert y._node is None and not y.requires_grad


def test_finite_diff_detects_nondeterminism():
    x = leaf([1.0])
    r = np.random.default_rng(0)
    with pytest.raises(ContractError):
        finite_diff_check(lambda t: T.sum_all(t * float(r.random())), x)


def test_log_is_clamped():
    assert np.isfinite(T.log(Tensor([0.0])).data).all()


def test_dropout_identity_without_mask(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    assert T.dropout(x, None, 0.5) is x


def test_layer_norm_normalizes(rng):
    x = Tensor(rng.normal(3.0, 2.0, (4, 16)))
    y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)


def test_float32_path(rng):
    x = Tensor(rng.normal(size=(2, 3)).astype(np.float32), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.sigmoid(x))
    tape.backward(loss)
    assert x.grad.dtype == np.float32
