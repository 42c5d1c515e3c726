"""Tape autodiff: kernel values, gradients, error paths."""

import numpy as np
import pytest

from nmil.autodiff import (
    NumericError,
    ShapeError,
    Tape,
    TapeError,
    backward,
    finite_diff_check,
    forward,
)


def test_identity_graph():
    tape = Tape()
    tape.set_output(tape.input("x"))
    out = forward(tape, {"x": [[3.0]]})
    assert out.item() == 3.0
    grads = backward(tape)
    assert grads["x"].data == np.ones((1, 1))


def test_sum_of_squares_value_and_gradient():
    tape = Tape()
    x = tape.input("x")
    tape.set_output(tape.reduce_sum(x * x))
    out = forward(tape, {"x": [1.0, 2.0, 3.0]})
    assert out.item() == 14.0
    grads = backward(tape)
    np.testing.assert_array_equal(grads["x"].data, [2.0, 4.0, 6.0])


def test_tanh_gradient_at_zero_is_one():
    tape = Tape()
    tape.set_output(tape.tanh(tape.input("x")))
    forward(tape, {"x": 0.0})
    assert backward(tape)["x"].data == 1.0


def test_softmax_of_equal_scores_is_uniform():
    tape = Tape()
    tape.set_output(tape.softmax(tape.input("s"), axis=0))
    out = forward(tape, {"s": [0.0, 0.0]})
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    tape = Tape()
    tape.set_output(tape.softmax(tape.input("s"), axis=1))
    out = forward(tape, {"s": rng.normal(size=(4, 9)) * 10})
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(4), atol=1e-12)


def test_matmul_transpose_flags():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(5, 3))
    tape = Tape()
    tape.set_output(tape.matmul(tape.input("a"), tape.input("b"), transpose_b=True))
    np.testing.assert_array_equal(forward(tape, {"a": a, "b": b}).data, a @ b.T)

    tape = Tape()
    tape.set_output(tape.matmul(tape.input("a"), tape.input("b"), transpose_a=True))
    np.testing.assert_array_equal(
        forward(tape, {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 2))}).data.shape,
        (4, 2),
    )


def test_matmul_shape_mismatch_names_node():
    tape = Tape()
    tape.set_output(tape.matmul(tape.input("a"), tape.input("b")))
    with pytest.raises(ShapeError, match=r"node 2 \(matmul\)"):
        forward(tape, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_log_of_negative_names_offending_node():
    tape = Tape()
    tape.set_output(tape.log(tape.input("x")))
    with pytest.raises(NumericError, match=r"node 1 \(log\)"):
        forward(tape, {"x": [-1.0]})


def test_nonfinite_input_rejected():
    tape = Tape()
    tape.set_output(tape.input("x") * 2.0)
    with pytest.raises(NumericError, match="node 0"):
        forward(tape, {"x": [np.nan]})


def test_missing_input_rejected():
    tape = Tape()
    tape.set_output(tape.input("x") + tape.input("y"))
    with pytest.raises(TapeError, match="missing input 'y'"):
        forward(tape, {"x": 1.0})


def test_backward_before_forward_rejected():
    tape = Tape()
    tape.set_output(tape.input("x"))
    with pytest.raises(TapeError):
        backward(tape)


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.input("x")
    tape.input("dead")
    tape.set_output(tape.reduce_sum(x))
    forward(tape, {"x": [1.0, 2.0], "dead": [[5.0, 5.0]]})
    grads = backward(tape)
    np.testing.assert_array_equal(grads["dead"].data, np.zeros((1, 2)))


def test_ref_operator_sugar():
    tape = Tape()
    p = tape.input("p")
    tape.set_output(tape.reduce_sum(1.0 - p + p * 2.0 - p / 2.0))
    out = forward(tape, {"p": [0.5, 0.25]})
    # 1 - p + 2p - p/2 = 1 + p/2
    assert out.item() == pytest.approx((1 + 0.25) + (1 + 0.125), abs=1e-15)


def test_concatenate_forward_and_gradient_routing():
    tape = Tape()
    a = tape.input("a")
    b = tape.input("b")
    cat = tape.concatenate([a, b], axis=1)
    tape.set_output(tape.reduce_sum(cat * cat))
    va, vb = np.array([[1.0, 2.0]]), np.array([[3.0]])
    out = forward(tape, {"a": va, "b": vb})
    assert out.item() == 14.0
    grads = backward(tape)
    np.testing.assert_array_equal(grads["a"].data, 2 * va)
    np.testing.assert_array_equal(grads["b"].data, 2 * vb)


def test_reduce_mean_keepdims_shape():
    tape = Tape()
    tape.set_output(tape.reduce_mean(tape.input("x"), axis=1, keepdims=True))
    out = forward(tape, {"x": np.arange(6.0).reshape(2, 3)})
    np.testing.assert_array_equal(out.data, [[1.0], [4.0]])


# --- finite-difference sweeps ------------------------------------------------


def _scalarize(tape, ref):
    tape.set_output(tape.reduce_sum(tape.multiply(ref, ref)))


KERNEL_GRAPHS = {
    "matmul": lambda t: t.matmul(t.input("a"), t.input("b")),
    "matmul_tt": lambda t: t.matmul(t.input("a"), t.input("b"),
                                    transpose_a=True, transpose_b=True),
    "add": lambda t: t.add(t.input("a"), t.input("b")),
    "multiply": lambda t: t.multiply(t.input("a"), t.input("b")),
    "tanh": lambda t: t.tanh(t.input("a")),
    "sigmoid": lambda t: t.sigmoid(t.input("a")),
    "exp": lambda t: t.exp(t.input("a")),
    "softmax": lambda t: t.softmax(t.input("a"), axis=1),
    "l2_normalize": lambda t: t.l2_normalize(t.input("a"), axis=1),
    "reduce_sum": lambda t: t.reduce_sum(t.input("a"), axis=0, keepdims=True),
    "reduce_mean": lambda t: t.reduce_mean(t.input("a"), axis=1, keepdims=True),
    "concat": lambda t: t.concatenate([t.input("a"), t.input("b")], axis=0),
}


@pytest.mark.parametrize("kernel", sorted(KERNEL_GRAPHS))
def test_kernel_gradients_match_finite_differences(kernel):
    build = KERNEL_GRAPHS[kernel]
    for seed in range(25):
        rng = np.random.default_rng(seed)
        shape_a = (rng.integers(1, 4), rng.integers(1, 4))
        inputs = {"a": rng.normal(size=shape_a)}
        if kernel in ("matmul", "matmul_tt"):
            k = int(rng.integers(1, 4))
            if kernel == "matmul":
                inputs["b"] = rng.normal(size=(shape_a[1], k))
            else:
                inputs["b"] = rng.normal(size=(k, shape_a[0]))
        elif kernel in ("add", "multiply", "concat"):
            inputs["b"] = rng.normal(size=shape_a)
        if kernel == "l2_normalize":
            inputs["a"] += np.sign(inputs["a"]) + 0.5  # keep rows away from zero
        tape = Tape()
        _scalarize(tape, build(tape))
        assert finite_diff_check(tape, inputs) <= 1e-4, f"{kernel} seed {seed}"


def test_log_gradient_matches_finite_differences():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.5, 3.0, size=(2, 3))
        tape = Tape()
        _scalarize(tape, tape.log(tape.input("a")))
        assert finite_diff_check(tape, {"a": x}) <= 1e-4


def test_reduce_max_gradient_without_ties():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        x = rng.permutation(np.arange(6.0) * 1.7 - 3).reshape(2, 3)
        tape = Tape()
        _scalarize(tape, tape.reduce_max(tape.input("a"), axis=1, keepdims=True))
        assert finite_diff_check(tape, {"a": x}) <= 1e-4


def test_layered_composite_gradient():
    # two dense layers with tanh/sigmoid between, softmax head
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        inputs = {
            "x": rng.normal(size=(3, 4)),
            "w1": rng.normal(size=(4, 5)) / 2,
            "w2": rng.normal(size=(5, 2)) / 2,
        }
        tape = Tape()
        h = tape.tanh(tape.matmul(tape.input("x"), tape.input("w1")))
        s = tape.softmax(tape.matmul(tape.sigmoid(h), tape.input("w2")), axis=1)
        _scalarize(tape, s)
        assert finite_diff_check(tape, inputs) <= 1e-4
