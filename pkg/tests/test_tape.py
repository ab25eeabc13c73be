import numpy as np
import pytest
from oracles import finite_difference_gradient, rel_vec_error

from viewgraft.errors import ContractError, ShapeError, TrainingDivergenceError
from viewgraft.numerics import Rng, matrix, sgd_step
from viewgraft.numerics.tape import (
    Tape,
    add,
    backward,
    broadcast_cols,
    column_dot_l1,
    concat_rows,
    cosine_similarity,
    gelu,
    hadamard,
    layer_norm,
    matmul,
    mse_loss,
    row_softmax,
    scale,
    slice_rows,
    transpose,
)


def entry_sum(node):
    """Sum of all entries, composed from matmul with ones."""
    tape = node.tape
    m, n = node.shape
    left = tape.leaf(np.ones((1, m)))
    right = tape.leaf(np.ones((n, 1)))
    return matmul(matmul(left, node), right)


def test_sum_gradient_is_all_ones():
    tape = Tape()
    w = tape.leaf(Rng(0).normal(4, 3), trainable=True)
    grads = backward(tape, entry_sum(w))
    assert np.allclose(grads[w], np.ones((4, 3)))


def test_norm_squared_gradient_matches_finite_differences():
    rng = Rng(5)
    w0 = rng.normal(4, 3)
    x0 = rng.normal(3, 2)

    def build(w):
        tape = Tape()
        wn = tape.leaf(w, trainable=True)
        xn = tape.leaf(x0)
        y = matmul(wn, xn)
        return tape, wn, scale(mse_loss(y, tape.leaf(np.zeros(y.shape))), y.value.size)

    tape, wn, loss = build(w0)
    grads = backward(tape, loss)

    def f(w):
        _, _, l = build(w)
        return float(l.value[0, 0])

    fd = finite_difference_gradient(f, [w0], 0)
    assert rel_vec_error(grads[wn], fd) <= 1e-4


def test_constant_leaf_gets_zero_gradient():
    tape = Tape()
    w = tape.leaf(Rng(1).normal(3, 3), trainable=True)
    unused = tape.leaf(Rng(2).normal(2, 2), trainable=True)
    const = tape.leaf(Rng(3).normal(3, 3))
    loss = mse_loss(w, const)
    grads = backward(tape, loss)
    assert np.all(grads[unused] == 0.0)
    assert const not in grads
    assert const.grad is None


def test_non_scalar_loss_rejected():
    tape = Tape()
    w = tape.leaf(Rng(1).normal(3, 3), trainable=True)
    with pytest.raises(ContractError):
        backward(tape, add(w, w))


def test_mixing_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.ones((2, 2)))
    b = t2.leaf(np.ones((2, 2)))
    with pytest.raises(ContractError):
        add(a, b)


def _loss_through(op_builder, arg_values, wrt=0):
    """Build scalar loss sum(op(args)^2) and return (analytic grad, fd grad)."""

    def build(*vals):
        tape = Tape()
        nodes = [tape.leaf(v, trainable=(i == wrt)) for i, v in enumerate(vals)]
        out = op_builder(tape, *nodes)
        zero = tape.leaf(np.zeros(out.shape))
        return tape, nodes[wrt], scale(mse_loss(out, zero), out.value.size)

    tape, target, loss = build(*arg_values)
    grads = backward(tape, loss)

    def f(*vals):
        _, _, l = build(*vals)
        return float(l.value[0, 0])

    fd = finite_difference_gradient(f, list(arg_values), wrt)
    return grads[target], fd


OP_CASES = {
    "matmul_lhs": (lambda t, a, b: matmul(a, b), [(4, 3), (3, 5)], 0),
    "matmul_rhs": (lambda t, a, b: matmul(a, b), [(4, 3), (3, 5)], 1),
    "add": (lambda t, a, b: add(a, b), [(4, 4), (4, 4)], 0),
    "hadamard": (lambda t, a, b: hadamard(a, b), [(3, 5), (3, 5)], 1),
    "scale": (lambda t, a: scale(a, -1.7), [(4, 4)], 0),
    "transpose": (lambda t, a: transpose(a), [(3, 5)], 0),
    "row_softmax": (lambda t, a: row_softmax(a), [(4, 6)], 0),
    "gelu": (lambda t, a: gelu(a), [(4, 4)], 0),
    "layer_norm": (lambda t, a: layer_norm(a), [(3, 8)], 0),
    "mse_loss": (lambda t, a, b: mse_loss(a, b), [(4, 4), (4, 4)], 0),
    "concat_rows": (lambda t, a, b: concat_rows([a, b]), [(2, 4), (3, 4)], 0),
    "slice_rows": (lambda t, a: slice_rows(a, 1, 4), [(6, 3)], 0),
    "broadcast_cols": (lambda t, a: broadcast_cols(a, 5), [(1, 6)], 0),
    "cosine_similarity": (lambda t, a, b: cosine_similarity(a, b), [(1, 8), (1, 8)], 0),
    "column_dot_l1": (lambda t, a, b: column_dot_l1(a, b), [(5, 4), (5, 4)], 0),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    builder, shapes, wrt = OP_CASES[name]
    for seed in range(10):
        rng = Rng(1000 + seed)
        args = [rng.normal(r, c) for (r, c) in shapes]
        got, want = _loss_through(builder, args, wrt)
        assert rel_vec_error(got, want) <= 1e-4, f"{name} seed {seed}"


def test_row_softmax_rows_sum_to_one():
    tape = Tape()
    y = row_softmax(tape.leaf(Rng(8).normal(5, 7)))
    assert np.allclose(y.value.sum(axis=1), 1.0)


def test_layer_norm_rows_are_standardized():
    tape = Tape()
    y = layer_norm(tape.leaf(Rng(8).normal(5, 16)))
    assert np.allclose(y.value.mean(axis=1), 0.0, atol=1e-9)
    assert np.allclose((y.value**2).mean(axis=1), 1.0, atol=1e-3)


def test_cosine_similarity_endpoints():
    tape = Tape()
    u = tape.leaf(np.array([[1.0, 0.0, 0.0]]))
    v = tape.leaf(np.array([[0.0, 1.0, 0.0]]))
    assert cosine_similarity(u, v).value[0, 0] == pytest.approx(0.0)
    w = tape.leaf(np.array([[1.0, 2.0, 3.0]]))
    assert cosine_similarity(w, w).value[0, 0] == pytest.approx(1.0, abs=1e-6)
    neg = tape.leaf(np.array([[-1.0, -2.0, -3.0]]))
    assert cosine_similarity(w, neg).value[0, 0] == pytest.approx(1.0, abs=1e-6)


def test_shape_errors_in_ops():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(a, b)
    with pytest.raises(ShapeError):
        slice_rows(a, 0, 5)
    with pytest.raises(ShapeError):
        broadcast_cols(a, 4)


def test_sgd_step_basics():
    p = {"w": matrix([[1.0]])}
    out = sgd_step(p, {"w": np.array([[2.0]])}, lr=0.5)
    assert out["w"][0, 0] == 0.0
    same = sgd_step(p, {"w": np.array([[2.0]])}, lr=0.0)
    assert same["w"][0, 0] == 1.0
    untouched = sgd_step(p, {}, lr=0.1)
    assert untouched["w"] is p["w"]


def test_sgd_step_rejects_non_finite_gradient():
    with pytest.raises(TrainingDivergenceError):
        sgd_step({"w": matrix([[1.0]])}, {"w": np.array([[np.nan]])}, lr=0.1)


def test_sgd_converges_on_quadratic():
    # minimize ||p - c||^2; optimum is c.
    c = Rng(13).normal(3, 3)
    params = {"p": matrix(np.zeros((3, 3), dtype=np.float32))}
    for _ in range(100):
        tape = Tape()
        p = tape.leaf(params["p"], trainable=True)
        loss = mse_loss(p, tape.leaf(c))
        grads = backward(tape, loss)
        params = sgd_step(params, {"p": grads[p]}, lr=2.0)
    assert np.max(np.abs(params["p"] - c)) <= 1e-3
