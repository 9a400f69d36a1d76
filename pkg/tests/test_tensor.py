import numpy as np
import pytest

from synthprobe.tensor import (Tape, Tensor, DimensionError, NumericError,
    UsageError, DataError, add, backward, bce_with_logits, concat_rows,
    contract_positions, conv1x1, gradcheck, losses, matmul, mse, mul,
    pointwise, relu, reduce_sum, reshape, scale, sigmoid, softmax_axis,
    softmax_cross_entropy, stage, transpose)

def test_matmul_gradient():
    tape = Tape()
    w = tape.watch([[1.0, 2.0]])
    x = tape.watch([[3.0], [4.0]])
    loss = reduce_sum(matmul(w, x))
    assert loss.item() == 11.0
    grads = backward(loss)
    assert np.array_equal(grads[w], [[3.0, 4.0]])
    assert np.array_equal(grads[x], [[1.0], [2.0]])

def test_tensors_are_float32_and_immutable():
    t = Tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32
    with pytest.raises(ValueError):
        t.data[0, 0] = 5

def test_shared_subexpression_accumulates():
    tape = Tape()
    x = tape.watch([1.0, -2.0, 3.0])
    loss = reduce_sum(add(mul(x, x), x))
    grads = backward(loss)
    assert np.allclose(grads[x], 2 * np.array([1.0, -2.0, 3.0]) + 1)

def test_unreached_leaf_has_zero_gradient():
    tape = Tape()
    x = tape.watch([1.0, 2.0])
    y = tape.watch([5.0])
    grads = backward(reduce_sum(scale(x, 3)))
    assert np.array_equal(grads[y], [0.0])
    assert np.array_equal(grads[x], [3.0, 3.0])

def test_dimension_error_names_both_shapes():
    with pytest.raises(DimensionError) as e:
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "[2, 3]" in str(e.value)
    with pytest.raises(DimensionError):
        add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        reshape(np.ones((2, 3)), (4, 2))

def test_numeric_error_reports_stage():
    with pytest.raises(NumericError) as e:
        with stage("λ_content"):
            relu(Tensor(np.array([np.inf], dtype = np.float32)))
    assert e.value.stage == "λ_content"

def test_backward_without_tape():
    with pytest.raises(UsageError):
        backward(reduce_sum(Tensor([1.0, 2.0])))

def test_backward_needs_scalar():
    tape = Tape()
    x = tape.watch([1.0, 2.0])
    with pytest.raises(UsageError):
        backward(scale(x, 2))

def test_mixed_tapes():
    a = Tape().watch([1.0])
    b = Tape().watch([2.0])
    with pytest.raises(UsageError):
        add(a, b)

def test_untracked_ops_record_nothing():
    y = matmul(np.eye(2), np.ones((2, 1)))
    assert y.tape is None

def test_softmax_rows_sum_to_one(rng):
    x = rng.standard_normal((3, 7)) * 50
    y = softmax_axis(x, 1).data
    assert np.allclose(y.sum(axis = 1), 1.0, atol = 1e-6)
    assert np.all(y >= 0)

def test_sigmoid_is_stable():
    y = sigmoid(np.array([-1000.0, 0.0, 1000.0])).data
    assert np.allclose(y, [0.0, 0.5, 1.0])

def test_contract_positions_matches_einsum(rng):
    s = rng.standard_normal((3, 5)).astype(np.float32)
    t = rng.standard_normal((3, 4, 5)).astype(np.float32)
    expected = np.einsum("mn,mcn->mc", s, t)
    assert np.allclose(contract_positions(s, t).data, expected, atol = 1e-5)

def test_pointwise_dispatch():
    x = Tensor([-1.0, 2.0])
    assert np.array_equal(pointwise(x, "relu").data, [0.0, 2.0])
    assert np.array_equal(pointwise(x, "scale", 2).data, [-2.0, 4.0])
    with pytest.raises(UsageError):
        pointwise(x, "tanh")
    with pytest.raises(UsageError):
        pointwise(x, "add")

def test_cross_entropy_rejects_bad_class():
    with pytest.raises(DataError):
        softmax_cross_entropy(np.zeros((3, 2)), [0, 3])

def test_loss_values():
    assert mse(np.array([1.0, 3.0]), [1.0, 1.0]).item() == pytest.approx(2.0)
    assert bce_with_logits(np.zeros(4), np.ones(4)).item() == \
        pytest.approx(np.log(2), rel = 1e-6)
    uniform = softmax_cross_entropy(np.zeros((4, 3)), [0, 1, 2]).item()
    assert uniform == pytest.approx(np.log(4), rel = 1e-6)
    with pytest.raises(UsageError):
        losses(np.zeros(2), np.zeros(2), "hinge")

def test_gradcheck_composite(rng):
    c = rng.standard_normal((3, 4))

    def fn(p):
        y = softmax_axis(matmul(p["a"], transpose(p["b"])), 1)
        z = concat_rows([y, reshape(p["c"], (1, 4))])
        return reduce_sum(mul(z, np.vstack([c, np.ones((1, 4))])))

    result = gradcheck(fn, {"a": rng.standard_normal((3, 2)),
                            "b": rng.standard_normal((4, 2)),
                            "c": rng.standard_normal(4)})
    assert result.ok(), result

def test_gradcheck_mse_through_sigmoid(rng):
    target = rng.random((2, 5))
    result = gradcheck(lambda p: mse(sigmoid(p["x"]), target),
                       {"x": rng.standard_normal((2, 5))})
    assert result.ok(), result

def test_gradcheck_bce(rng):
    target = (rng.random((2, 5)) > 0.5).astype(np.float64)
    result = gradcheck(lambda p: bce_with_logits(p["x"], target),
                       {"x": rng.standard_normal((2, 5))})
    assert result.ok(), result

def test_gradcheck_cross_entropy_and_contraction(rng):
    target = np.array([0, 2, 1, 1])

    def fn(p):
        k = contract_positions(p["s"], reshape(p["t"], (3, 3, 4)))
        logits = matmul(k, p["x"])
        return softmax_cross_entropy(logits, target)

    result = gradcheck(fn, {"s": rng.standard_normal((3, 4)),
                            "t": rng.standard_normal((9, 4)),
                            "x": rng.standard_normal((3, 4))})
    assert result.ok(), result

def test_conv1x1_matches_loop(rng):
    x = rng.standard_normal((3, 6)).astype(np.float32)
    w = rng.standard_normal((2, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    y = conv1x1(x, w, b).data
    for n in range(6):
        assert np.allclose(y[:, n], w @ x[:, n] + b, atol = 1e-5)
    with pytest.raises(DimensionError):
        conv1x1(x, w.T, b)

def test_gradcheck_conv1x1(rng):
    x = rng.standard_normal((3, 6))
    result = gradcheck(lambda p: reduce_sum(sigmoid(conv1x1(x, p["w"], p["b"]))),
                       {"w": rng.standard_normal((2, 3)),
                        "b": rng.standard_normal(2)})
    assert result.ok(), result
