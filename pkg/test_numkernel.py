"""
数値カーネルのテスト
順伝播の性質と、各テープ演算の逆伝播を中心差分と照合する
"""

import numpy as np
import pytest

from errors import DimensionError, NumericError, StateError, ValidationError
from numkernel import (
    Elementwise, GradTape, as_matrix, backward, concat_cols, elementwise, finite_diff_grad,
    gradient_check, layer_norm, matmul, matrix_relative_error, relative_error, softmax_rows,
)

TOLERANCE = 1e-4
SEEDS = 100


def _away_from_zero(rng, shape):
    x = rng.uniform(0.2, 1.5, size=shape)
    return x * rng.choice((-1.0, 1.0), size=shape)


def op_grad_error(build, params, seed=0):
    """sum(op(params) * R) の勾配を解析・数値の両方で求めて最大相対誤差を返す"""
    tape = GradTape()
    variables = {name: tape.watch(name, value) for name, value in params.items()}
    out = tape.mark_output(build(tape, variables))
    direction = np.random.default_rng(seed).normal(size=out.shape)
    grads = tape.backward(direction)

    def loss(p):
        t = GradTape()
        vs = {name: t.watch(name, value) for name, value in p.items()}
        return float((t.value(build(t, vs)) * direction).sum())

    return gradient_check(loss, params, grads)


# ---------------------------------------------------------------------------
# 順伝播
# ---------------------------------------------------------------------------

def test_matmul_shapes():
    a = np.arange(6.0).reshape(2, 3)
    b = np.ones((3, 4))
    assert matmul(a, b).shape == (2, 4)
    with pytest.raises(DimensionError) as info:
        matmul(a, np.ones((4, 5)))
    assert "2x3" in str(info.value) and "4x5" in str(info.value)


def test_softmax_rows_is_stochastic_and_stable():
    a = np.array([[1000.0, 1001.0, 1002.0], [-5.0, 0.0, 5.0]])
    s = softmax_rows(a)
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=1), 1.0)
    np.testing.assert_allclose(s[0], softmax_rows(np.array([[0.0, 1.0, 2.0]]))[0])


def test_softmax_rows_rejects_zero_columns():
    with pytest.raises(DimensionError):
        softmax_rows(np.zeros((2, 0)))


def test_layer_norm_normalizes_rows(rng):
    x = rng.normal(size=(4, 6)) * 3 + 2
    y = layer_norm(x, np.ones(6), np.zeros(6))
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-3)
    with pytest.raises(DimensionError):
        layer_norm(x, np.ones(5), np.zeros(6))


def test_layer_norm_empty_rows():
    assert layer_norm(np.zeros((0, 3)), np.ones(3), np.zeros(3)).shape == (0, 3)


def test_elementwise_binary_shape_mismatch():
    with pytest.raises(DimensionError):
        elementwise(Elementwise.ADD, np.ones((2, 2)), np.ones((2, 3)))
    np.testing.assert_array_equal(elementwise(Elementwise.RELU, np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_concat_cols_order_and_rows():
    a, b = np.ones((2, 1)), np.zeros((2, 2))
    np.testing.assert_array_equal(concat_cols([a, b]), [[1, 0, 0], [1, 0, 0]])
    with pytest.raises(DimensionError):
        concat_cols([a, np.zeros((3, 1))])
    with pytest.raises(ValidationError):
        concat_cols([])


def test_small_examples():
    np.testing.assert_array_equal(matmul(np.array([[1.0, 0.0, -1.0]]), np.array([[2.0], [5.0], [4.0]])), [[-2.0]])
    assert matmul(np.zeros((0, 3)), np.ones((3, 2))).shape == (0, 2)
    np.testing.assert_array_equal(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_rows(np.array([[7.0, 7.0, 7.0]])), [[1 / 3] * 3])
    np.testing.assert_array_equal(layer_norm(np.array([[5.0, 5.0, 5.0]]), np.ones(3), np.zeros(3)), [[0.0, 0.0, 0.0]])
    scaled = 3.0 / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(layer_norm(np.array([[0.0, 2.0]]), [3.0, 3.0], [1.0, 1.0]),
                               [[1.0 - scaled, 1.0 + scaled]], rtol=1e-12)
    np.testing.assert_array_equal(elementwise(Elementwise.MUL, np.array([[2.0, 3.0]]), np.array([[4.0, -1.0]])),
                                  [[8.0, -3.0]])
    assert elementwise(Elementwise.SIGMOID, np.zeros((1, 1)))[0, 0] == 0.5


def test_matmul_associativity(rng):
    for _ in range(20):
        a, b, c = (rng.normal(size=(4, 4)) for _ in range(3))
        np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-9, atol=1e-12)


def test_concat_then_slice_recovers_parts(rng):
    parts = [rng.normal(size=(3, w)) for w in (2, 1, 4)]
    joined = concat_cols(parts)
    start = 0
    for part in parts:
        assert np.array_equal(joined[:, start:start + part.shape[1]], part)
        start += part.shape[1]


def test_as_matrix_promotes_vectors():
    assert as_matrix([1, 2, 3]).shape == (1, 3)
    assert as_matrix([], cols=4).shape == (0, 4)


# ---------------------------------------------------------------------------
# 逆伝播
# ---------------------------------------------------------------------------

UNARY_OPS = {
    "transpose": lambda t, v: t.transpose(v["x"]),
    "scale": lambda t, v: t.scale(v["x"], -0.7),
    "sigmoid": lambda t, v: t.sigmoid(v["x"]),
    "tanh": lambda t, v: t.tanh(v["x"]),
    "relu": lambda t, v: t.relu(v["x"]),
    "softmax_rows": lambda t, v: t.softmax_rows(v["x"]),
    "slice_cols": lambda t, v: t.slice_cols(v["x"], 1, 3),
    "mean_rows": lambda t, v: t.mean_rows(v["x"]),
    "take_row": lambda t, v: t.take_row(v["x"], 1),
    "stack_rows": lambda t, v: t.stack_rows([t.take_row(v["x"], 2), t.take_row(v["x"], 0)]),
    "dropout": lambda t, v: t.dropout(v["x"], np.array([[2.0, 0.0, 2.0, 2.0]] * 3)),
    "sum_all": lambda t, v: t.sum_all(v["x"]),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_op_gradients(name):
    for seed in range(SEEDS):
        x = _away_from_zero(np.random.default_rng(seed), (3, 4))
        errors = op_grad_error(UNARY_OPS[name], {"x": x}, seed)
        assert errors["x"] < TOLERANCE, seed


@pytest.mark.parametrize("seed", range(SEEDS))
def test_binary_op_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    bias = rng.normal(size=(1, 4))
    cases = {
        "matmul": (lambda t, v: t.matmul(v["a"], v["w"]), {"a": a, "w": w}),
        "add": (lambda t, v: t.add(v["a"], v["b"]), {"a": a, "b": b}),
        "mul": (lambda t, v: t.mul(v["a"], v["b"]), {"a": a, "b": b}),
        "add_bias": (lambda t, v: t.add_bias(v["a"], v["bias"]), {"a": a, "bias": bias}),
        "concat_cols": (lambda t, v: t.concat_cols([v["a"], v["c"]]), {"a": a, "c": rng.normal(size=(3, 2))}),
    }
    for name, (build, params) in cases.items():
        errors = op_grad_error(build, params, seed)
        assert max(errors.values()) < TOLERANCE, name


def test_layer_norm_gradient():
    for seed in range(SEEDS):
        rng = np.random.default_rng(seed)
        params = {"x": rng.normal(size=(3, 5)), "gain": rng.normal(size=(1, 5)), "bias": rng.normal(size=(1, 5))}
        errors = op_grad_error(lambda t, v: t.layer_norm(v["x"], v["gain"], v["bias"]), params, seed)
        assert max(errors.values()) < TOLERANCE, seed


def test_attention_chain_gradient():
    """softmax(x W_q (x W_k)^T / 2) x W_v 全体の勾配（全要素）"""

    def build(t, v):
        q, k, val = t.matmul(v["x"], v["wq"]), t.matmul(v["x"], v["wk"]), t.matmul(v["x"], v["wv"])
        scores = t.scale(t.matmul(q, t.transpose(k)), 0.5)
        return t.matmul(t.softmax_rows(scores), val)

    for seed in range(SEEDS):
        rng = np.random.default_rng(seed)
        params = {"x": rng.normal(size=(3, 4)), "wq": rng.normal(size=(4, 2)),
                  "wk": rng.normal(size=(4, 2)), "wv": rng.normal(size=(4, 2))}
        assert max(op_grad_error(build, params, seed).values()) < TOLERANCE, seed


def test_three_layer_composition_gradient():
    def build(t, v):
        h1 = t.tanh(t.add_bias(t.matmul(v["x"], v["w1"]), v["b1"]))
        h2 = t.sigmoid(t.matmul(h1, v["w2"]))
        return t.matmul(h2, v["w3"])

    for seed in range(SEEDS):
        rng = np.random.default_rng(seed)
        params = {"x": rng.normal(size=(3, 4)), "w1": rng.normal(size=(4, 5)), "b1": rng.normal(size=(1, 5)),
                  "w2": rng.normal(size=(5, 4)), "w3": rng.normal(size=(4, 2))}
        errors = op_grad_error(build, params, seed)
        assert max(errors.values()) < TOLERANCE, (seed, errors)


def test_reused_variable_accumulates():
    tape = GradTape()
    x = tape.watch("x", np.array([[1.0, 2.0]]))
    tape.mark_output(tape.add(x, x))
    grads = tape.backward(np.ones((1, 2)))
    np.testing.assert_array_equal(grads["x"], [[2.0, 2.0]])


def test_unused_parameter_gets_zero_gradient():
    tape = GradTape()
    x = tape.watch("x", np.ones((1, 2)))
    tape.watch("unused", np.ones((2, 2)))
    tape.sum_all(x)
    grads = backward(tape, np.ones((1, 1)))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_backward_state_errors():
    with pytest.raises(StateError):
        GradTape().backward(np.ones((1, 1)))
    tape = GradTape()
    x = tape.watch("x", np.ones((1, 1)))
    tape.sum_all(x)
    tape.backward(np.ones((1, 1)))
    with pytest.raises(StateError):
        tape.backward(np.ones((1, 1)))
    with pytest.raises(StateError):
        tape.sum_all(x)


# ---------------------------------------------------------------------------
# 有限差分
# ---------------------------------------------------------------------------

def test_finite_diff_grad_quadratic(rng):
    x = rng.normal(size=(2, 3))
    np.testing.assert_allclose(finite_diff_grad(lambda m: float((m ** 2).sum()), x), 2 * x, atol=1e-6)


def test_finite_diff_grad_detects_non_finite():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda m: float("inf"), np.zeros((1, 1)))


def test_gradient_check_flags_wrong_gradient(rng):
    params = {"x": rng.normal(size=(2, 2))}
    loss = lambda p: float((p["x"] ** 2).sum())
    assert gradient_check(loss, params, {"x": 2 * params["x"]})["x"] < TOLERANCE
    assert gradient_check(loss, params, {"x": 3 * params["x"]})["x"] > 0.1


def test_gradient_check_entry_subset(rng):
    params = {"x": rng.normal(size=(5, 5))}
    loss = lambda p: float((p["x"] ** 3).sum())
    errors = gradient_check(loss, params, {"x": 3 * params["x"] ** 2}, max_entries=4, rng=rng)
    assert errors["x"] < TOLERANCE


def test_relative_error_floor():
    assert float(relative_error(np.float64(0.0), np.float64(0.0))) == 0.0
    assert float(relative_error(np.float64(2e-11), np.float64(1e-11))) > TOLERANCE


def test_gradient_check_rejects_tiny_wrong_gradient():
    params = {"x": np.ones((2, 2))}
    loss = lambda p: 1e-11 * float(p["x"].sum())
    assert gradient_check(loss, params, {"x": np.full((2, 2), 1e-11)})["x"] < TOLERANCE
    assert gradient_check(loss, params, {"x": np.full((2, 2), 2e-11)})["x"] > TOLERANCE
    assert gradient_check(loss, params, {"x": np.full((2, 2), 2e-11)}, per_matrix=True)["x"] > TOLERANCE


def test_matrix_relative_error():
    assert matrix_relative_error(np.array([[3.0, 4.0]]), np.array([[3.0, 4.0]])) == 0.0
    assert matrix_relative_error(np.array([[3.0, 0.0]]), np.array([[3.0, 4.0]])) == pytest.approx(4 / (5 + 1e-8))
