"""Engine-level gradient and semantics tests.

Expected gradients come from the central-difference oracle in helpers.py;
hand-frozen values below were produced with that oracle (h=1e-3, float64)
and cross-checked against closed forms where one exists.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import analytic_grads, assert_grads_close, check_against_fd, finite_diff

from mstp.autodiff import (
    Tensor, backward, no_grad, ops,
    add, concat, cross_entropy_logits, div, embedding, exp, gelu,
    keep_top_k, layernorm, log, matmul, mean, mul, neg, relu, reshape,
    scale_channels, scale_rows, slice_rows, softmax, sub, transpose,
)
from mstp.errors import (
    ContractError, DegenerateDistributionError, GraphError, ShapeError,
)


def rnd(*shape, seed=0, lo=-1.0, hi=1.0):
    g = np.random.Generator(np.random.Philox(key=np.arange(2, dtype=np.uint64) + seed))
    return g.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------------------
# frozen examples


def test_matmul_sum_grad_frozen():
    # d/dA sum(A @ B) at A = ones(2,2), B = I. Oracle output, frozen:
    expected = np.array([[1.0, 1.0], [1.0, 1.0]])
    a = np.ones((2, 2))
    b = np.eye(2)
    fd = finite_diff(lambda A: matmul(A, Tensor(b, dtype=np.float64)).sum(), [a])
    np.testing.assert_allclose(fd[0], expected, atol=1e-9)
    got = analytic_grads(lambda A: matmul(A, Tensor(b, dtype=np.float64)).sum(), [a])
    np.testing.assert_allclose(got[0], expected, atol=1e-12)


def test_softmax_with_masked_entry_frozen():
    out = softmax(Tensor([3.0, -np.inf, 2.0], dtype=np.float64))
    expected = np.array([0.7310585786300049, 0.0, 0.2689414213699951])
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    assert out.data[1] == 0.0
    assert abs(out.data.sum() - 1.0) <= 1e-6


def test_keep_top_k_example():
    out = keep_top_k(Tensor([0.1, 0.9, 0.9, 0.2]), 2)
    np.testing.assert_array_equal(out.data, np.array([-np.inf, 0.9, 0.9, -np.inf], np.float32))


def test_keep_top_k_tie_break_lowest_index():
    out = keep_top_k(Tensor([0.5, 0.9, 0.5, 0.2]), 2)
    np.testing.assert_array_equal(out.data, np.array([0.5, 0.9, -np.inf, -np.inf], np.float32))
    # all-equal row: the first k indices survive
    out = keep_top_k(Tensor([[1.0, 1.0, 1.0, 1.0]]), 2)
    np.testing.assert_array_equal(out.data[0], np.array([1.0, 1.0, -np.inf, -np.inf], np.float32))


# ---------------------------------------------------------------------------
# gradient sweeps against the oracle


def test_elementwise_grads():
    x = rnd(3, 4, seed=1)
    y = rnd(3, 4, seed=2)
    check_against_fd(lambda a, b: (a * b + a - b).sum(), [x, y])
    check_against_fd(lambda a, b: div(a, b).sum(), [x, y + 2.0])
    check_against_fd(lambda a: neg(a).sum(), [x])
    check_against_fd(lambda a: (a * 3.0 + 1.5).mean(), [x])


def test_scalar_and_bias_add_grads():
    x = rnd(2, 5, seed=3)
    bias = rnd(5, seed=4)
    s = np.array(0.7)
    check_against_fd(lambda a, b: add(a, b).sum(), [x, bias])
    check_against_fd(lambda a, c: add(a, c).sum(), [x, s])
    check_against_fd(lambda a, b: mul(a, b).sum(), [x, np.array(-1.3)])


def test_add_rejects_general_broadcasting():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))
    with pytest.raises(ShapeError):
        mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_nonlinearity_grads():
    x = rnd(4, 3, seed=5) * 2
    check_against_fd(lambda a: relu(a).sum(), [x + 0.05])  # keep away from the kink
    check_against_fd(lambda a: gelu(a).sum(), [x])
    check_against_fd(lambda a: exp(a).mean(), [x])
    check_against_fd(lambda a: log(a).sum(), [np.abs(x) + 0.5])


def test_relu_derivative_at_zero_is_zero():
    x = Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True, dtype=np.float64)
    relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_reduction_grads():
    x = rnd(3, 4, 2, seed=6)
    check_against_fd(lambda a: a.sum(), [x])
    check_against_fd(lambda a: a.sum(axis=1).mean(), [x])
    check_against_fd(lambda a: a.mean(axis=(0, 2)).sum(), [x])
    check_against_fd(lambda a: a.mean(), [x])


def test_matmul_grads():
    a = rnd(3, 4, seed=7)
    b = rnd(4, 2, seed=8)
    check_against_fd(lambda x, y: matmul(x, y).sum(), [a, b])
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_softmax_grads():
    x = rnd(3, 5, seed=9) * 3
    check_against_fd(lambda a: (softmax(a, axis=-1) * Tensor(rnd(3, 5, seed=10), dtype=np.float64)).sum(), [x])


def test_softmax_degenerate_and_invalid():
    with pytest.raises(DegenerateDistributionError):
        softmax(Tensor([-np.inf, -np.inf]))
    with pytest.raises(ContractError):
        softmax(Tensor([np.inf, 1.0]))
    with pytest.raises(ContractError):
        softmax(Tensor([np.nan, 1.0]))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(min_value=-30, max_value=30, allow_nan=False), min_size=1, max_size=8),
)
def test_softmax_rows_normalised(values):
    out = softmax(Tensor(np.array(values, dtype=np.float64)))
    assert abs(out.data.sum() - 1.0) <= 1e-6
    assert (out.data >= 0).all()


def test_layernorm_grads_and_moments():
    x = rnd(4, 6, seed=11) * 2
    y = layernorm(Tensor(x, dtype=np.float64))
    np.testing.assert_allclose(y.data.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.data.var(axis=-1), 1.0, atol=1e-4)
    check_against_fd(lambda a: (layernorm(a) * Tensor(rnd(4, 6, seed=12), dtype=np.float64)).sum(), [x])


def test_shape_op_grads():
    x = rnd(2, 3, 4, seed=13)
    w = rnd(3, 4, seed=14)
    check_against_fd(lambda a: reshape(a, (6, 4)).mean(), [x])
    check_against_fd(lambda a: transpose(a, (2, 0, 1)).sum(), [x])
    check_against_fd(
        lambda a, b: concat([reshape(a, (6, 4)), b], axis=0).mean(), [x, w]
    )
    check_against_fd(lambda a: slice_rows(a, 1, 3).sum(), [rnd(5, 3, seed=15)])
    with pytest.raises(ShapeError):
        slice_rows(Tensor(np.ones((4, 2))), 3, 6)
    with pytest.raises(ShapeError):
        concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


def test_embedding_grad_accumulates_duplicates():
    table = Tensor(rnd(6, 3, seed=16), requires_grad=True, dtype=np.float64)
    out = embedding(table, np.array([1, 1, 4]))
    out.sum().backward()
    expected = np.zeros((6, 3))
    expected[1] = 2.0
    expected[4] = 1.0
    np.testing.assert_allclose(table.grad, expected)
    with pytest.raises(ContractError):
        embedding(table, np.array([7]))


def test_keep_top_k_grad_through_softmax():
    # tie-free, gaps well above 2h, so the kept set is stable under FD probes
    x = np.array([[0.3, -0.1, 0.8, 0.2]])
    c = rnd(1, 4, seed=24)
    check_against_fd(
        lambda a: (softmax(keep_top_k(a, 2), axis=-1) * Tensor(c, dtype=np.float64)).sum(), [x]
    )


def test_keep_top_k_grad_is_zero_at_dropped_entries():
    x = Tensor(np.array([0.3, -0.1, 0.8, 0.2]), requires_grad=True, dtype=np.float64)
    weights = Tensor(np.array([0.7, 1.3, -0.2, 0.9]), dtype=np.float64)
    (softmax(keep_top_k(x, 2)) * weights).sum().backward()
    assert x.grad[1] == 0.0 and x.grad[3] == 0.0
    assert x.grad[0] != 0.0 and x.grad[2] != 0.0


def test_keep_top_k_contract_errors():
    with pytest.raises(ContractError):
        keep_top_k(Tensor([1.0, 2.0]), 0)
    with pytest.raises(ContractError):
        keep_top_k(Tensor([1.0, 2.0]), 3)
    with pytest.raises(ContractError):
        keep_top_k(Tensor([np.inf, 2.0]), 1)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(min_value=1, max_value=8).flatmap(
        lambda n: st.tuples(
            st.lists(
                st.floats(min_value=-100, max_value=100, allow_nan=False),
                min_size=n, max_size=n,
            ),
            st.integers(min_value=1, max_value=n),
        )
    )
)
def test_keep_top_k_sparsity_property(case):
    values, k = case
    out = keep_top_k(Tensor(np.array(values, dtype=np.float64)), k).data
    assert np.isfinite(out).sum() == k
    kept = sorted(np.flatnonzero(np.isfinite(out)))
    ranked = sorted(range(len(values)), key=lambda i: (-values[i], i))[:k]
    assert kept == sorted(ranked)


def test_scale_rows_and_channels_grads():
    x = rnd(4, 3, seed=17)
    w = rnd(4, seed=18)
    check_against_fd(lambda a, b: scale_rows(a, b).sum(), [x, w])
    vol = rnd(3, 2, 2, 2, seed=19)
    gains = rnd(3, seed=20)
    check_against_fd(lambda a, b: scale_channels(a, b).sum(), [vol, gains])
    batched = rnd(2, 3, 2, 2, 2, seed=21)
    bg = rnd(2, 3, seed=22)
    check_against_fd(lambda a, b: scale_channels(a, b).sum(), [batched, bg])
    with pytest.raises(ShapeError):
        scale_channels(Tensor(vol), Tensor(np.ones(4)))


def test_cross_entropy_logits_value_and_grad():
    z = np.array([0.2, -1.0, 1.4])
    loss = cross_entropy_logits(Tensor(z, dtype=np.float64), 2)
    probs = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(float(loss.data), -np.log(probs[2]), rtol=1e-12)
    check_against_fd(lambda a: cross_entropy_logits(a, 2), [z])
    with pytest.raises(ContractError):
        cross_entropy_logits(Tensor(z), 3)
    with pytest.raises(ShapeError):
        cross_entropy_logits(Tensor(np.ones((2, 2))), 0)


# ---------------------------------------------------------------------------
# graph mechanics


def test_fanout_accumulates_additively():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True, dtype=np.float64)
    y = add(x, x)             # uses x twice through one node
    z = add(y, mul(x, 2.0))   # and once more through another path
    z.sum().backward()
    np.testing.assert_allclose(x.grad, [4.0, 4.0])


def test_every_reachable_tracked_tensor_gets_a_grad():
    x = Tensor(rnd(2, 2, seed=23), requires_grad=True)
    mid = relu(x)
    out = mid.sum()
    out.backward()
    assert x.grad is not None and x.grad.shape == (2, 2)
    assert mid.grad is not None and mid.grad.shape == (2, 2)
    assert out.grad is not None


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(relu(x))


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_backward_through_shared_subgraph_raises_after_consumption():
    x = Tensor(np.ones(3), requires_grad=True)
    shared = x * 2.0
    first = shared.sum()
    second = shared.mean()
    first.backward()
    with pytest.raises(GraphError):
        second.backward()


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert y.node is None and not y.requires_grad
    with pytest.raises(GraphError):
        y.backward()


def test_disconnected_loss_raises():
    loss = Tensor(np.array(1.0))
    with pytest.raises(GraphError):
        backward(loss)


def test_float32_default_storage_float64_opt_in():
    t = Tensor([1.0, 2.0])
    assert t.dtype == np.float32
    t64 = Tensor([1.0, 2.0], dtype=np.float64)
    out = add(t64, t64)
    assert out.dtype == np.float64
