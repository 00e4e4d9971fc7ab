"""
数値カーネル
行優先の密行列演算・逆伝播テープ・有限差分による勾配検証を提供する
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DimensionError, NumericError, StateError, ValidationError

# 行 = 時刻ステップ, 列 = 特徴次元 (l × d)
Matrix = np.ndarray

LAYER_NORM_EPS = 1e-5
FINITE_DIFF_STEP = 1e-5
GRAD_CHECK_FLOOR = 1e-8


class Elementwise(Enum):
    """要素ごとの演算"""
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    ADD = "add"
    MUL = "mul"

    @property
    def is_binary(self) -> bool:
        return self in (Elementwise.ADD, Elementwise.MUL)


def as_matrix(data, cols: Optional[int] = None) -> Matrix:
    """任意の入れ子リスト/配列をfloat64の2次元行列に変換"""
    array = np.asarray(data, dtype=np.float64)
    if array.size == 0 and cols is not None:
        return np.zeros((0, cols), dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ValidationError(f"2次元行列が必要です (ndim={array.ndim})")
    return array


def check_finite(name: str, a: Matrix) -> Matrix:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name}: 非有限値を検出しました")
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """標準の行列積 (a.rows × b.cols)"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    return a @ b


def softmax_rows(a: Matrix) -> Matrix:
    """行ごとのsoftmax（最大値を引いて安定化）"""
    if a.ndim != 2 or a.shape[1] == 0:
        raise DimensionError("softmax_rows", a.shape)
    shifted = a - a.max(axis=1, keepdims=True) if a.shape[0] else a
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def sigmoid(a: Matrix) -> Matrix:
    out = np.empty_like(a, dtype=np.float64)
    positive = a >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-a[positive]))
    exp = np.exp(a[~positive])
    out[~positive] = exp / (1.0 + exp)
    return out


_UNARY = {
    Elementwise.SIGMOID: sigmoid,
    Elementwise.TANH: np.tanh,
    Elementwise.RELU: lambda a: np.maximum(a, 0.0),
}

_BINARY = {
    Elementwise.ADD: np.add,
    Elementwise.MUL: np.multiply,
}


def elementwise(op: Elementwise, a: Matrix, b: Optional[Matrix] = None) -> Matrix:
    """要素ごとの演算 (sigmoid, tanh, relu, add, mul)"""
    op = Elementwise(op)
    if op.is_binary:
        if b is None or a.shape != b.shape:
            raise DimensionError(op.value, a.shape, () if b is None else b.shape)
        return _BINARY[op](a, b)
    return _UNARY[op](a)


def _as_row(vector, n: int, name: str) -> Matrix:
    row = np.asarray(vector, dtype=np.float64).reshape(1, -1)
    if row.shape[1] != n:
        raise DimensionError(f"layer_norm.{name}", row.shape, (1, n))
    return row


def _normalize(x: Matrix, eps: float) -> Tuple[Matrix, Matrix]:
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (x - mean) * inv_std, inv_std


def layer_norm(x: Matrix, gain, bias, eps: float = LAYER_NORM_EPS) -> Matrix:
    """行ごとのレイヤー正規化（平均0・分散1にしてからgain倍・bias加算）"""
    if x.ndim != 2 or x.shape[1] == 0:
        raise DimensionError("layer_norm", x.shape)
    gain_row = _as_row(gain, x.shape[1], "gain")
    bias_row = _as_row(bias, x.shape[1], "bias")
    if x.shape[0] == 0:
        return np.zeros_like(x)
    normalized, _ = _normalize(x, eps)
    return normalized * gain_row + bias_row


def concat_cols(parts: Sequence[Matrix]) -> Matrix:
    """列方向の連結（引数順）"""
    if not parts:
        raise ValidationError("concat_cols: 連結する行列がありません")
    rows = parts[0].shape[0]
    for part in parts[1:]:
        if part.shape[0] != rows:
            raise DimensionError("concat_cols", parts[0].shape, part.shape)
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# 逆伝播テープ
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Var:
    """テープ上の値への参照"""
    index: int
    shape: Tuple[int, ...]


@dataclass(frozen=True)
class TapeRecord:
    """テープの1操作（Wengertリストの1行）"""
    op: str
    inputs: Tuple[int, ...]
    output: int
    saved: Dict[str, object] = field(default_factory=dict)


class GradTape:
    """順伝播を記録し、逆伝播で全パラメータの勾配を返すテープ

    1本のテープにつき forward / backward は1組のみ。
    """

    def __init__(self):
        self.values: List[Matrix] = []
        self.records: List[TapeRecord] = []
        self.params: Dict[str, int] = {}
        self.output: Optional[Var] = None
        self._consumed = False

    # --- 葉ノード ---------------------------------------------------------
    def _push(self, value: Matrix) -> Var:
        self.values.append(value)
        return Var(len(self.values) - 1, value.shape)

    def watch(self, name: str, value: Matrix) -> Var:
        """パラメータとして登録（勾配の対象）"""
        if name in self.params:
            return Var(self.params[name], self.values[self.params[name]].shape)
        var = self._push(np.asarray(value, dtype=np.float64))
        self.params[name] = var.index
        return var

    def constant(self, value: Matrix) -> Var:
        return self._push(np.asarray(value, dtype=np.float64))

    def value(self, var: Var) -> Matrix:
        return self.values[var.index]

    def _record(self, op: str, inputs: Sequence[Var], value: Matrix, **saved) -> Var:
        if self._consumed:
            raise StateError("backward済みのテープには記録できません")
        out = self._push(value)
        self.records.append(TapeRecord(op, tuple(v.index for v in inputs), out.index, saved))
        return out

    def mark_output(self, var: Var) -> Var:
        self.output = var
        return var

    # --- 演算 -------------------------------------------------------------
    def matmul(self, a: Var, b: Var) -> Var:
        return self._record("matmul", (a, b), matmul(self.value(a), self.value(b)))

    def transpose(self, a: Var) -> Var:
        return self._record("transpose", (a,), self.value(a).T.copy())

    def scale(self, a: Var, factor: float) -> Var:
        return self._record("scale", (a,), self.value(a) * factor, factor=factor)

    def elementwise(self, op: Elementwise, a: Var, b: Optional[Var] = None) -> Var:
        op = Elementwise(op)
        if op.is_binary:
            if b is None:
                raise DimensionError(op.value, a.shape, ())
            value = elementwise(op, self.value(a), self.value(b))
            return self._record(op.value, (a, b), value)
        return self._record(op.value, (a,), elementwise(op, self.value(a)))

    def add(self, a: Var, b: Var) -> Var:
        return self.elementwise(Elementwise.ADD, a, b)

    def mul(self, a: Var, b: Var) -> Var:
        return self.elementwise(Elementwise.MUL, a, b)

    def sigmoid(self, a: Var) -> Var:
        return self.elementwise(Elementwise.SIGMOID, a)

    def tanh(self, a: Var) -> Var:
        return self.elementwise(Elementwise.TANH, a)

    def relu(self, a: Var) -> Var:
        return self.elementwise(Elementwise.RELU, a)

    def softmax_rows(self, a: Var) -> Var:
        return self._record("softmax_rows", (a,), softmax_rows(self.value(a)))

    def layer_norm(self, x: Var, gain: Var, bias: Var, eps: float = LAYER_NORM_EPS) -> Var:
        value = layer_norm(self.value(x), self.value(gain), self.value(bias), eps)
        normalized, inv_std = _normalize(self.value(x), eps)
        return self._record("layer_norm", (x, gain, bias), value,
                            normalized=normalized, inv_std=inv_std)

    def concat_cols(self, parts: Sequence[Var]) -> Var:
        value = concat_cols([self.value(p) for p in parts])
        return self._record("concat_cols", parts, value, widths=[p.shape[1] for p in parts])

    def slice_cols(self, a: Var, start: int, stop: int) -> Var:
        return self._record("slice_cols", (a,), self.value(a)[:, start:stop].copy(),
                            start=start, stop=stop)

    def add_bias(self, x: Var, bias: Var) -> Var:
        if bias.shape != (1, x.shape[1]):
            raise DimensionError("add_bias", x.shape, bias.shape)
        return self._record("add_bias", (x, bias), self.value(x) + self.value(bias))

    def mean_rows(self, x: Var) -> Var:
        if x.shape[0] == 0:
            raise DimensionError("mean_rows", x.shape)
        return self._record("mean_rows", (x,), self.value(x).mean(axis=0, keepdims=True))

    def take_row(self, x: Var, row: int) -> Var:
        return self._record("take_row", (x,), self.value(x)[row:row + 1].copy(), row=row)

    def stack_rows(self, rows: Sequence[Var]) -> Var:
        value = np.concatenate([self.value(r) for r in rows], axis=0)
        return self._record("stack_rows", rows, value)

    def dropout(self, x: Var, mask: Matrix) -> Var:
        return self._record("dropout", (x,), self.value(x) * mask, mask=mask)

    def sum_all(self, x: Var) -> Var:
        return self._record("sum_all", (x,), np.array([[self.value(x).sum()]]))

    # --- 逆伝播 -----------------------------------------------------------
    def backward(self, loss_grad: Matrix) -> Dict[str, Matrix]:
        """出力への勾配から全パラメータの勾配を計算"""
        if not self.records:
            raise StateError("forwardが記録されていません")
        if self._consumed:
            raise StateError("このテープは既にbackward済みです")
        output = self.output.index if self.output is not None else self.records[-1].output
        seed = np.asarray(loss_grad, dtype=np.float64).reshape(self.values[output].shape)

        grads: List[Optional[Matrix]] = [None] * len(self.values)
        grads[output] = seed
        for record in reversed(self.records):
            upstream = grads[record.output]
            if upstream is None:
                continue
            inputs = [self.values[i] for i in record.inputs]
            local = _BACKWARD[record.op](upstream, inputs, self.values[record.output], record.saved)
            for index, grad in zip(record.inputs, local):
                grads[index] = grad if grads[index] is None else grads[index] + grad

        self._consumed = True
        return {
            name: grads[index] if grads[index] is not None else np.zeros_like(self.values[index])
            for name, index in self.params.items()
        }


def _layer_norm_backward(g, inputs, out, saved):
    _, gain, _ = inputs
    normalized, inv_std = saved["normalized"], saved["inv_std"]
    d_norm = g * gain
    dx = inv_std * (d_norm
                    - d_norm.mean(axis=1, keepdims=True)
                    - normalized * (d_norm * normalized).mean(axis=1, keepdims=True))
    return dx, (g * normalized).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)


def _slice_backward(g, inputs, out, saved):
    grad = np.zeros_like(inputs[0])
    grad[:, saved["start"]:saved["stop"]] = g
    return (grad,)


def _take_row_backward(g, inputs, out, saved):
    grad = np.zeros_like(inputs[0])
    grad[saved["row"]] = g[0]
    return (grad,)


def _split_cols(g, widths):
    bounds = np.cumsum([0] + list(widths))
    return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(widths)))


_BACKWARD: Dict[str, Callable] = {
    "matmul": lambda g, x, out, s: (g @ x[1].T, x[0].T @ g),
    "transpose": lambda g, x, out, s: (g.T,),
    "scale": lambda g, x, out, s: (g * s["factor"],),
    "add": lambda g, x, out, s: (g, g),
    "mul": lambda g, x, out, s: (g * x[1], g * x[0]),
    "sigmoid": lambda g, x, out, s: (g * out * (1.0 - out),),
    "tanh": lambda g, x, out, s: (g * (1.0 - out * out),),
    "relu": lambda g, x, out, s: (g * (x[0] > 0),),
    "softmax_rows": lambda g, x, out, s: (out * (g - (g * out).sum(axis=1, keepdims=True)),),
    "layer_norm": _layer_norm_backward,
    "concat_cols": lambda g, x, out, s: _split_cols(g, s["widths"]),
    "slice_cols": _slice_backward,
    "add_bias": lambda g, x, out, s: (g, g.sum(axis=0, keepdims=True)),
    "mean_rows": lambda g, x, out, s: (np.repeat(g / x[0].shape[0], x[0].shape[0], axis=0),),
    "take_row": _take_row_backward,
    "stack_rows": lambda g, x, out, s: tuple(g[k:k + 1] for k in range(len(x))),
    "dropout": lambda g, x, out, s: (g * s["mask"],),
    "sum_all": lambda g, x, out, s: (np.full(x[0].shape, g[0, 0]),),
}


def backward(tape: GradTape, loss_grad: Matrix) -> Dict[str, Matrix]:
    """テープを逆再生して全パラメータの勾配を返す"""
    return tape.backward(loss_grad)


# ---------------------------------------------------------------------------
# 有限差分
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Matrix], float], x: Matrix,
                     step: float = FINITE_DIFF_STEP) -> Matrix:
    """中心差分による勾配推定（要素ごと）"""
    grad = np.zeros_like(x, dtype=np.float64)
    for index in np.ndindex(*x.shape):
        plus = x.copy()
        minus = x.copy()
        plus[index] += step
        minus[index] -= step
        f_plus, f_minus = float(f(plus)), float(f(minus))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"finite_diff_grad: 位置{index}で非有限値")
        grad[index] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: Matrix, numeric: Matrix) -> Matrix:
    return np.abs(analytic - numeric) / (np.abs(numeric) + GRAD_CHECK_FLOOR)


def matrix_relative_error(analytic: Matrix, numeric: Matrix) -> float:
    """行列全体のノルムで測った相対誤差 ||a - n|| / (||n|| + floor)"""
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(analytic - numeric) / (np.linalg.norm(numeric) + GRAD_CHECK_FLOOR))


def gradient_check(loss_fn: Callable[[Dict[str, Matrix]], float],
                   params: Dict[str, Matrix],
                   analytic: Dict[str, Matrix],
                   step: float = FINITE_DIFF_STEP,
                   max_entries: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None,
                   per_matrix: bool = False) -> Dict[str, float]:
    """パラメータごとに解析勾配と中心差分の相対誤差を返す

    既定では要素ごとの相対誤差の最大値。per_matrix=True では全要素の中心差分を
    求めたうえで行列ノルムの相対誤差を返す。
    max_entries を指定すると各行列からランダムに選んだ要素だけを検査する。
    """
    errors: Dict[str, float] = {}
    for name, value in params.items():
        indices = list(np.ndindex(*value.shape))
        if max_entries is not None and len(indices) > max_entries:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[k] for k in sorted(picks)]
        expected = np.array([analytic[name][index] for index in indices], dtype=np.float64)
        numeric = np.empty(len(indices))
        for k, index in enumerate(indices):
            def shifted_loss(delta: float) -> float:
                shifted = dict(params)
                shifted[name] = value.copy()
                shifted[name][index] += delta
                return float(loss_fn(shifted))
            numeric[k] = (shifted_loss(step) - shifted_loss(-step)) / (2.0 * step)
        if per_matrix:
            errors[name] = matrix_relative_error(expected, numeric)
        else:
            errors[name] = float(relative_error(expected, numeric).max(initial=0.0))
    return errors
