import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mettle.tensorcore import (
    ComputeGraph,
    GraphError,
    Rng,
    ShapeError,
    Tensor,
    add,
    bce_logits,
    concat,
    constant,
    cross_entropy_logits,
    finite_diff_check,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    narrow,
    nearest_upsample,
    no_grad,
    parameter,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax_rows,
    transpose,
)


def test_grad_of_weighted_sum_is_the_constant():
    c = np.array([[1.0, -2.0], [0.5, 3.0]])
    w = parameter(np.ones((2, 2)), tag="adaptation")
    with ComputeGraph() as g:
        out = reduce_sum(mul(w, constant(c)), axes=(0, 1))
    grads = g.backward(out)
    assert np.array_equal(grads.get(w).data, c)


def test_unused_parameter_absent_from_map():
    w = parameter(np.ones((2, 2)), tag="adaptation")
    unused = parameter(np.ones((3,)), tag="adaptation")
    with ComputeGraph() as g:
        out = reduce_mean(w, axes=(0, 1))
    grads = g.backward(out)
    assert grads.get(w) is not None
    assert grads.get(unused) is None
    assert unused not in grads


def test_loss_must_be_scalar():
    w = parameter(np.ones((2, 2)), tag="adaptation")
    with ComputeGraph() as g:
        y = add(w, w)
    with pytest.raises(ShapeError):
        g.backward(y)


def test_detached_loss_rejected():
    x = constant([[1.0, 2.0]])
    with ComputeGraph() as g:
        y = reduce_mean(x, axes=(0, 1))
    with pytest.raises(GraphError):
        g.backward(y)


def test_loss_from_other_graph_rejected():
    w = parameter(np.ones((1, 1)), tag="adaptation")
    with ComputeGraph() as g1:
        y = reduce_mean(w, axes=(0, 1))
    with ComputeGraph() as g2:
        pass
    with pytest.raises(GraphError):
        g2.backward(y)


def test_no_grad_produces_detached_leaves():
    w = parameter(np.ones((2, 2)), tag="adaptation")
    with ComputeGraph() as g:
        with no_grad():
            y = matmul(w, w)
        assert y.is_leaf and not y.requires_grad
    assert len(g.nodes) == 0


def test_frozen_backbone_leaf_gets_no_gradient():
    frozen = Tensor(np.ones((2, 2)), tag="backbone", requires_grad=False)
    w = parameter(np.ones((2, 2)), tag="adaptation")
    with ComputeGraph() as g:
        out = reduce_mean(matmul(frozen, w), axes=(0, 1))
    grads = g.backward(out)
    assert grads.get(frozen) is None
    assert grads.get(w) is not None


def test_duplicate_input_accumulates():
    w = parameter(np.array([[2.0]]), tag="adaptation")
    with ComputeGraph() as g:
        out = reduce_sum(mul(w, w), axes=(0, 1))
    grads = g.backward(out)
    assert grads.get(w).data == pytest.approx(np.array([[4.0]]))


def _mlp_loss(x_data, target_cls):
    def f(ps):
        w1, b1, w2, gamma, beta = ps
        h = relu(linear(constant(x_data), w1, b1))
        h = layer_norm(h, gamma, beta)
        logits = linear(h, w2)
        return cross_entropy_logits(logits, constant(target_cls))
    return f


def test_finite_diff_on_mlp_chain():
    rng = Rng(11)
    x = rng.normal((3, 4))
    params = [
        parameter(rng.xavier_uniform((4, 5)), tag="adaptation"),
        parameter(rng.normal((5,), std=0.1), tag="adaptation"),
        parameter(rng.xavier_uniform((5, 3)), tag="adaptation"),
        parameter(np.ones(5) + rng.normal((5,), std=0.1), tag="adaptation"),
        parameter(rng.normal((5,), std=0.1), tag="adaptation"),
    ]
    err = finite_diff_check(_mlp_loss(x, np.array([0.0, 2.0, 1.0])), params)
    assert err < 1e-6


def test_finite_diff_quadratic_exact_to_step_squared():
    w = parameter(np.array([1.0, -2.0, 0.5]).reshape(1, 3), tag="adaptation")

    def f(ps):
        return reduce_sum(mul(ps[0], ps[0]), axes=(0, 1))

    err = finite_diff_check(f, [w], step=1e-4)
    assert err < 1e-9


def test_finite_diff_constant_function():
    w = parameter(np.ones((2,)).reshape(1, 2), tag="adaptation")

    def f(ps):
        return reduce_mean(constant([[5.0]]), axes=(0, 1))

    assert finite_diff_check(f, [w]) == 0.0


_OP_MIXES = ["softmax", "gelu_sigmoid", "layernorm", "structural", "attention", "bce"]


@given(
    m=st.integers(1, 8), k=st.integers(1, 8), n=st.integers(1, 8),
    mix=st.sampled_from(_OP_MIXES), seed=st.integers(0, 2**31),
)
@settings(max_examples=25, deadline=None)
def test_backward_matches_finite_differences_on_random_graphs(m, k, n, mix, seed):
    rng = Rng(seed)
    x = rng.normal((m, k))
    w = parameter(rng.xavier_uniform((k, n)), tag="adaptation")
    b = parameter(rng.normal((n,), std=0.2), tag="adaptation")
    t = (rng.uniform((m, n)) > 0.5).astype(np.float64)

    def f(ps):
        w_, b_ = ps
        h = linear(constant(x), w_, b_)
        if mix == "softmax":
            h = softmax_rows(h)
        elif mix == "gelu_sigmoid":
            h = sigmoid(gelu(h))
        elif mix == "layernorm":
            h = layer_norm(h, constant(np.ones(n)), constant(np.zeros(n)))
        elif mix == "structural":
            h = transpose(reshape(h, (m * n, 1)), (1, 0))
            h = narrow(h, 1, 0, m * n)
            h = concat([h, h], axis=0)
        elif mix == "attention":
            probs = softmax_rows(matmul(h, transpose(h, (1, 0))))
            h = matmul(probs, h)
        elif mix == "bce":
            return bce_logits(h, constant(t))
        # weight by a fixed generic matrix so no composition is constant
        # (mean of a softmax row, for instance, would have an identically
        # zero gradient and finite differences would return pure noise)
        cmat = Rng(seed + 1).normal(h.shape)
        return reduce_mean(mul(h, constant(cmat)), axes=tuple(range(h.ndim)))

    err = finite_diff_check(f, [w, b])
    assert err < 1e-6


def test_nearest_upsample_forward_and_grad():
    x = parameter(np.arange(4.0).reshape(1, 2, 2, 1), tag="adaptation")

    def f(ps):
        return reduce_mean(nearest_upsample(ps[0], 2), axes=(0, 1, 2, 3))

    with ComputeGraph() as g:
        up = nearest_upsample(x, 2)
    assert up.shape == (1, 4, 4, 1)
    assert np.array_equal(up.data[0, :, :, 0],
                          np.array([[0, 0, 1, 1], [0, 0, 1, 1],
                                    [2, 2, 3, 3], [2, 2, 3, 3]], dtype=float))
    assert finite_diff_check(f, [x]) < 1e-6


def test_gradient_map_reports_exactly_reachable_grad_tensors():
    w = parameter(np.ones((2, 2)), tag="adaptation")
    v = parameter(np.ones((2, 2)), tag="head")
    with ComputeGraph() as g:
        h = matmul(w, constant(np.eye(2)))
        out = reduce_mean(h, axes=(0, 1))
        # v participates in a dead-end computation not feeding the loss
        _dead = matmul(v, constant(np.eye(2)))
    grads = g.backward(out)
    assert w in grads and h in grads and out in grads
    assert v not in grads
