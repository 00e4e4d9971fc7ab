"""
融合モデル
クロスアテンションブロック(CAB)による早期融合トランスフォーマーと、後期融合の積層LSTM
"""

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionError, ValidationError, file_error
from numkernel import GradTape, Matrix, Var, as_matrix, check_finite, concat_cols, softmax_rows
from sequences import (
    LABELS, FeatureSequence, Modality, MODALITY_ORDER, Segment,
    modality_label, parse_modalities,
)

CHECKPOINT_FORMAT = "multimodal-sentiment-checkpoint"
CHECKPOINT_VERSION = 1
NUM_CLASSES = 3

# クラス index <-> ラベル値 (-1 -> 0, 0 -> 1, +1 -> 2)
LABEL_TO_INDEX = {label: index for index, label in enumerate(LABELS)}
INDEX_TO_LABEL = dict(enumerate(LABELS))

SequenceInput = Union[FeatureSequence, Matrix]


class ModelKind(Enum):
    """融合モデルの種類"""
    MULT = "mult"
    LF_LSTM = "lf_lstm"

    @property
    def display_name(self) -> str:
        return {ModelKind.MULT: "Mult", ModelKind.LF_LSTM: "LFLSTM"}[self]


class FusionMode(Enum):
    """モダリティ潜在表現のまとめ方"""
    CONCAT = "concat"
    SUM = "sum"


def _features(x: SequenceInput) -> Matrix:
    if isinstance(x, FeatureSequence):
        return x.features
    return as_matrix(x)


def _mask_text(modalities: Sequence[Modality]) -> str:
    return "".join(m.letter for m in modalities)


# ---------------------------------------------------------------------------
# 設定
# ---------------------------------------------------------------------------

@dataclass
class MultConfig:
    """CABトランスフォーマーの設定"""
    dims: Tuple[int, int, int]
    modalities: Tuple[Modality, ...] = MODALITY_ORDER
    d_k: int = 32
    layers: int = 1
    fusion: FusionMode = FusionMode.CONCAT
    residual: bool = False
    head_hidden: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if isinstance(self.modalities, str):
            self.modalities = parse_modalities(self.modalities)
        self.modalities = tuple(m for m in MODALITY_ORDER if m in set(self.modalities))
        self.fusion = FusionMode(self.fusion)

    def validate(self) -> "MultConfig":
        _validate_common(self.dims, self.modalities, self.head_hidden, self.dropout)
        if self.d_k < 1:
            raise ValidationError(f"d_k は1以上が必要です ({self.d_k})")
        if self.layers < 1:
            raise ValidationError(f"layers は1以上が必要です ({self.layers})")
        return self

    def to_dict(self) -> Dict:
        return {
            "dims": list(self.dims),
            "modalities": _mask_text(self.modalities),
            "d_k": self.d_k,
            "layers": self.layers,
            "fusion": self.fusion.value,
            "residual": self.residual,
            "head_hidden": self.head_hidden,
            "dropout": self.dropout,
        }


@dataclass
class LstmConfig:
    """後期融合LSTMの設定"""
    dims: Tuple[int, int, int]
    modalities: Tuple[Modality, ...] = MODALITY_ORDER
    hidden: int = 16
    head_hidden: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if isinstance(self.modalities, str):
            self.modalities = parse_modalities(self.modalities)
        self.modalities = tuple(m for m in MODALITY_ORDER if m in set(self.modalities))

    def validate(self) -> "LstmConfig":
        _validate_common(self.dims, self.modalities, self.head_hidden, self.dropout)
        if self.hidden < 1:
            raise ValidationError(f"hidden は1以上が必要です ({self.hidden})")
        return self

    def to_dict(self) -> Dict:
        return {
            "dims": list(self.dims),
            "modalities": _mask_text(self.modalities),
            "hidden": self.hidden,
            "head_hidden": self.head_hidden,
            "dropout": self.dropout,
        }


def _validate_common(dims, modalities, head_hidden, dropout) -> None:
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValidationError(f"dims は正の整数3つが必要です ({dims})")
    if not modalities:
        raise ValidationError("モダリティマスクが空です")
    if head_hidden < 0:
        raise ValidationError(f"head_hidden は0以上が必要です ({head_hidden})")
    if not 0.0 <= dropout < 1.0:
        raise ValidationError(f"dropout は [0, 1) の範囲が必要です ({dropout})")


# ---------------------------------------------------------------------------
# パラメータのビュー
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CabParams:
    """1本のアテンションの射影行列 W^Q, W^K, W^V (入力次元 × d_k)"""
    W_Q: Matrix
    W_K: Matrix
    W_V: Matrix

    @property
    def d_k(self) -> int:
        return self.W_K.shape[1]

    def validate(self) -> "CabParams":
        if self.W_Q.shape[1] != self.W_K.shape[1]:
            raise DimensionError("CabParams.d_k", self.W_Q.shape, self.W_K.shape)
        if self.W_K.shape[0] != self.W_V.shape[0]:
            raise DimensionError("CabParams.key/value", self.W_K.shape, self.W_V.shape)
        return self

    @classmethod
    def identity(cls, d: int) -> "CabParams":
        eye = np.eye(d)
        return cls(eye, eye.copy(), eye.copy())


@dataclass(frozen=True)
class LstmParams:
    """LSTMのゲート重み（[x, h_prev] -> hidden）とバイアス"""
    W_i: Matrix
    W_f: Matrix
    W_o: Matrix
    W_c: Matrix
    b_i: Matrix
    b_f: Matrix
    b_o: Matrix
    b_c: Matrix

    @property
    def hidden(self) -> int:
        return self.W_i.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W_i.shape[0] - self.hidden

    def validate(self) -> "LstmParams":
        for gate in "ifoc":
            weight = np.asarray(getattr(self, f"W_{gate}"))
            bias = np.asarray(getattr(self, f"b_{gate}")).reshape(1, -1)
            if weight.shape != self.W_i.shape:
                raise DimensionError(f"LstmParams.W_{gate}", weight.shape, self.W_i.shape)
            if bias.shape != (1, self.hidden):
                raise DimensionError(f"LstmParams.b_{gate}", bias.shape, (1, self.hidden))
        return self

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "LstmParams":
        w = np.zeros((input_dim + hidden, hidden))
        b = np.zeros((1, hidden))
        return cls(w, w.copy(), w.copy(), w.copy(), b, b.copy(), b.copy(), b.copy())


# ---------------------------------------------------------------------------
# テープ上の構成要素
# ---------------------------------------------------------------------------

def _watch_attention(tape: GradTape, params: Mapping[str, Matrix], prefix: str) -> Tuple[Var, Var, Var]:
    return tuple(tape.watch(f"{prefix}.{w}", params[f"{prefix}.{w}"]) for w in ("W_Q", "W_K", "W_V"))


def _attend(tape: GradTape, query: Var, source: Var, weights: Tuple[Var, Var, Var],
            residual: bool = False) -> Var:
    """softmax(Q_x K_y^T / sqrt(d_k)) V_y"""
    w_q, w_k, w_v = weights
    if w_q.shape[1] != w_k.shape[1]:
        raise DimensionError("cab.d_k", w_q.shape, w_k.shape)
    q = tape.matmul(query, w_q)
    k = tape.matmul(source, w_k)
    v = tape.matmul(source, w_v)
    scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / np.sqrt(w_k.shape[1]))
    z = tape.matmul(tape.softmax_rows(scores), v)
    if residual and z.shape == query.shape:
        z = tape.add(z, query)
    return z


def _lstm_step(tape: GradTape, x_row: Var, h: Var, c: Var, gates: Mapping[str, Tuple[Var, Var]]) -> Tuple[Var, Var]:
    xh = tape.concat_cols([x_row, h])

    def gate(name: str) -> Var:
        weight, bias = gates[name]
        return tape.add_bias(tape.matmul(xh, weight), bias)

    i = tape.sigmoid(gate("i"))
    f = tape.sigmoid(gate("f"))
    o = tape.sigmoid(gate("o"))
    g = tape.tanh(gate("c"))
    c_new = tape.add(tape.mul(f, c), tape.mul(i, g))
    h_new = tape.mul(o, tape.tanh(c_new))
    return h_new, c_new


def _watch_lstm(tape: GradTape, params: Mapping[str, Matrix], prefix: str) -> Dict[str, Tuple[Var, Var]]:
    return {g: (tape.watch(f"{prefix}.W_{g}", params[f"{prefix}.W_{g}"]),
                tape.watch(f"{prefix}.b_{g}", params[f"{prefix}.b_{g}"]))
            for g in "ifoc"}


def _run_lstm(tape: GradTape, x: Var, gates: Mapping[str, Tuple[Var, Var]], hidden: int) -> Tuple[Var, List[Var]]:
    if x.shape[0] == 0:
        raise DimensionError("lstm", x.shape)
    h = tape.constant(np.zeros((1, hidden)))
    c = tape.constant(np.zeros((1, hidden)))
    states = []
    for t in range(x.shape[0]):
        h, c = _lstm_step(tape, tape.take_row(x, t), h, c, gates)
        states.append(h)
    return h, states


def _dropout(tape: GradTape, x: Var, rate: float, rng: Optional[np.random.Generator]) -> Var:
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return tape.dropout(x, mask)


def _head(tape: GradTape, params: Mapping[str, Matrix], fused: Var, head_hidden: int,
          dropout: float, rng: Optional[np.random.Generator]) -> Var:
    if head_hidden == 0:
        logits = tape.add_bias(tape.matmul(fused, tape.watch("head.W", params["head.W"])),
                               tape.watch("head.b", params["head.b"]))
        return tape.mark_output(logits)
    hidden = tape.relu(tape.add_bias(tape.matmul(fused, tape.watch("head.W1", params["head.W1"])),
                                     tape.watch("head.b1", params["head.b1"])))
    hidden = _dropout(tape, hidden, dropout, rng)
    logits = tape.add_bias(tape.matmul(hidden, tape.watch("head.W2", params["head.W2"])),
                           tape.watch("head.b2", params["head.b2"]))
    return tape.mark_output(logits)


def _head_shapes(fused_width: int, head_hidden: int) -> Dict[str, Tuple[int, int]]:
    if head_hidden == 0:
        return {"head.W": (fused_width, NUM_CLASSES), "head.b": (1, NUM_CLASSES)}
    return {
        "head.W1": (fused_width, head_hidden), "head.b1": (1, head_hidden),
        "head.W2": (head_hidden, NUM_CLASSES), "head.b2": (1, NUM_CLASSES),
    }


# ---------------------------------------------------------------------------
# 単体の演算
# ---------------------------------------------------------------------------

def project_qkv(x: SequenceInput, params: CabParams) -> Tuple[Matrix, Matrix, Matrix]:
    """Q = x W^Q, K = x W^K, V = x W^V"""
    x = _features(x)
    tape = GradTape()
    x_var = tape.constant(x)
    return tuple(tape.value(tape.matmul(x_var, tape.constant(w))) for w in (params.W_Q, params.W_K, params.W_V))


def cab(x: SequenceInput, y: SequenceInput, params: CabParams) -> Matrix:
    """CAB_{x->y}: クエリは x、キーと値は y から。出力の行数は x に従う"""
    tape = GradTape()
    weights = tuple(tape.constant(w) for w in (params.W_Q, params.W_K, params.W_V))
    return tape.value(_attend(tape, tape.constant(_features(x)), tape.constant(_features(y)), weights))


def attention_weights(x: SequenceInput, y: SequenceInput, params: CabParams) -> Matrix:
    """CAB内部のアテンション重み（各行の和は1）"""
    q = _features(x) @ params.W_Q
    k = _features(y) @ params.W_K
    return softmax_rows((q @ k.T) * (1.0 / np.sqrt(params.d_k)))


def modality_latent(z_from_y: Matrix, z_from_k: Matrix) -> Matrix:
    """Z_x = [Z_{y->x}; Z_{k->x}]（列方向の連結、t < a < v の順で渡す）"""
    return concat_cols([as_matrix(z_from_y), as_matrix(z_from_k)])


def lstm_cell(x_row, h_prev, c_prev, params: LstmParams) -> Tuple[np.ndarray, np.ndarray]:
    """標準的なLSTMセル1ステップ。戻り値は (h, c) の1次元ベクトル"""
    x_row = np.asarray(x_row, dtype=np.float64).reshape(1, -1)
    h_prev = np.asarray(h_prev, dtype=np.float64).reshape(1, -1)
    c_prev = np.asarray(c_prev, dtype=np.float64).reshape(1, -1)
    params.validate()
    if x_row.shape[1] != params.input_dim:
        raise DimensionError("lstm_cell.x", x_row.shape, (1, params.input_dim))
    if h_prev.shape[1] != params.hidden or c_prev.shape[1] != params.hidden:
        raise DimensionError("lstm_cell.state", h_prev.shape, c_prev.shape, (1, params.hidden))
    tape = GradTape()
    gates = {g: (tape.constant(getattr(params, f"W_{g}")),
                 tape.constant(np.asarray(getattr(params, f"b_{g}")).reshape(1, -1)))
             for g in "ifoc"}
    h, c = _lstm_step(tape, tape.constant(x_row), tape.constant(h_prev), tape.constant(c_prev), gates)
    return tape.value(h)[0], tape.value(c)[0]


# ---------------------------------------------------------------------------
# モデル
# ---------------------------------------------------------------------------

class FusionModel:
    """融合モデルの共通部分（パラメータ辞書・初期化・推論）"""

    kind: ModelKind = ModelKind.MULT

    def __init__(self, config, params: Optional[Dict[str, Matrix]] = None, seed: int = 0):
        self.config = config.validate()
        shapes = self.parameter_shapes()
        if params is None:
            params = self._init_params(shapes, np.random.default_rng(seed))
        self.params = self._checked(params, shapes)

    # --- パラメータ -------------------------------------------------------
    def parameter_shapes(self) -> Dict[str, Tuple[int, int]]:
        raise NotImplementedError

    @staticmethod
    def _init_params(shapes: Dict[str, Tuple[int, int]], rng: np.random.Generator) -> Dict[str, Matrix]:
        """重みは U(-1/sqrt(fan_in), 1/sqrt(fan_in))、バイアスは0、正規化のgainは1"""
        params = {}
        for name, shape in shapes.items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                params[name] = np.ones(shape)
            elif leaf.startswith("b") or leaf == "bias":
                params[name] = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
        return params

    @staticmethod
    def _checked(params: Mapping[str, Matrix], shapes: Dict[str, Tuple[int, int]]) -> Dict[str, Matrix]:
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        if missing or extra:
            raise ValidationError(f"パラメータ名が構成と一致しません (不足: {missing[:3]}, 余分: {extra[:3]})")
        checked = {}
        for name, shape in shapes.items():
            value = np.array(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ValidationError(f"パラメータ {name}: 形状 {value.shape} != 期待 {shape}")
            checked[name] = check_finite(name, value)
        return checked

    def with_params(self, params: Mapping[str, Matrix]) -> "FusionModel":
        return type(self)(self.config, dict(params))

    def copy(self) -> "FusionModel":
        return self.with_params({k: v.copy() for k, v in self.params.items()})

    # --- 属性 ---------------------------------------------------------------
    @property
    def modalities(self) -> Tuple[Modality, ...]:
        return self.config.modalities

    @property
    def is_unimodal(self) -> bool:
        return len(self.modalities) == 1

    @property
    def label(self) -> str:
        """表示名（例: TVA-Mult, T-LFLSTM）"""
        return f"{modality_label(self.modalities)}-{self.kind.display_name}"

    def input_dim(self, modality: Modality) -> int:
        return self.config.dims[MODALITY_ORDER.index(modality)]

    # --- 推論 ---------------------------------------------------------------
    def _inputs(self, sequences: Mapping[Modality, SequenceInput]) -> Dict[Modality, Matrix]:
        inputs = {}
        for modality in self.modalities:
            if modality not in sequences:
                raise ValidationError(f"{self.label}: {modality.value} 系列がありません")
            x = _features(sequences[modality])
            if x.shape[1] != self.input_dim(modality):
                raise DimensionError(f"{self.label}.{modality.value}", x.shape, (x.shape[0], self.input_dim(modality)))
            if x.shape[0] == 0:
                raise ValidationError(f"{self.label}: {modality.value} 系列が空です")
            inputs[modality] = x
        lengths = {m.value: x.shape[0] for m, x in inputs.items()}
        if len(set(lengths.values())) > 1:
            raise ValidationError(f"系列長が揃っていません {lengths}: 先に align_corpus を実行してください")
        return inputs

    def forward(self, sequences: Mapping[Modality, SequenceInput],
                rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, GradTape]:
        """ロジット(3要素)と逆伝播用テープを返す。rng を渡すと学習時のdropoutが有効になる"""
        tape = GradTape()
        logits = self._build(tape, self._inputs(sequences), rng)
        return tape.value(logits)[0].copy(), tape

    def _build(self, tape: GradTape, inputs: Dict[Modality, Matrix],
               rng: Optional[np.random.Generator]) -> Var:
        raise NotImplementedError

    def logits(self, segment: Segment) -> np.ndarray:
        return self.forward(segment.sequences)[0]

    def predict(self, segment: Segment) -> int:
        """argmaxのクラスをラベル値で返す（同値は小さいindexを優先）"""
        return INDEX_TO_LABEL[int(np.argmax(self.logits(segment)))]

    def to_document(self) -> Dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": self.kind.value,
            "config": self.config.to_dict(),
            "params": [
                {"name": name, "shape": list(value.shape), "values": value.ravel().tolist()}
                for name, value in self.params.items()
            ],
        }


class MultModel(FusionModel):
    """CABによる早期融合トランスフォーマー

    入力自己注意 -> 有向CAB（単一モダリティ時は自己注意） -> 潜在の連結
    -> 出力自己注意 -> 時間平均 -> 連結(または和) -> 分類ヘッド
    """

    kind = ModelKind.MULT

    def sources(self, target: Modality) -> Tuple[Modality, ...]:
        others = tuple(m for m in self.modalities if m is not target)
        return others or (target,)

    def latent_width(self, target: Modality) -> int:
        return self.config.d_k * len(self.sources(target))

    def fused_width(self) -> int:
        widths = [self.latent_width(m) for m in self.modalities]
        return widths[0] if self.config.fusion is FusionMode.SUM else sum(widths)

    def parameter_shapes(self) -> Dict[str, Tuple[int, int]]:
        cfg = self.config
        shapes: Dict[str, Tuple[int, int]] = {}
        for m in self.modalities:
            for w in ("W_Q", "W_K", "W_V"):
                shapes[f"sa_in.{m.letter}.{w}"] = (self.input_dim(m), cfg.d_k)
        for x in self.modalities:
            for y in self.sources(x):
                for layer in range(cfg.layers):
                    for w in ("W_Q", "W_K", "W_V"):
                        shapes[f"cab.{x.letter}{y.letter}.{layer}.{w}"] = (cfg.d_k, cfg.d_k)
        for m in self.modalities:
            width = self.latent_width(m)
            for w in ("W_Q", "W_K", "W_V"):
                shapes[f"sa_out.{m.letter}.{w}"] = (width, width)
        shapes.update(_head_shapes(self.fused_width(), cfg.head_hidden))
        return shapes

    def cab_params(self, prefix: str) -> CabParams:
        return CabParams(*(self.params[f"{prefix}.{w}"] for w in ("W_Q", "W_K", "W_V")))

    def _build(self, tape, inputs, rng):
        cfg = self.config
        hidden = {
            m: _attend(tape, tape.constant(x), tape.constant(x),
                       _watch_attention(tape, self.params, f"sa_in.{m.letter}"))
            for m, x in inputs.items()
        }
        pooled = []
        for x in self.modalities:
            streams = []
            for y in self.sources(x):
                stream = hidden[x]
                for layer in range(cfg.layers):
                    weights = _watch_attention(tape, self.params, f"cab.{x.letter}{y.letter}.{layer}")
                    stream = _attend(tape, stream, hidden[y], weights, cfg.residual)
                streams.append(stream)
            latent = streams[0] if len(streams) == 1 else tape.concat_cols(streams)
            latent = _attend(tape, latent, latent,
                             _watch_attention(tape, self.params, f"sa_out.{x.letter}"), cfg.residual)
            pooled.append(tape.mean_rows(latent))
        if len(pooled) == 1:
            fused = pooled[0]
        elif cfg.fusion is FusionMode.SUM:
            fused = pooled[0]
            for part in pooled[1:]:
                fused = tape.add(fused, part)
        else:
            fused = tape.concat_cols(pooled)
        return _head(tape, self.params, fused, cfg.head_hidden, cfg.dropout, rng)


class LfLstmModel(FusionModel):
    """モダリティごとの2層LSTM（間にレイヤー正規化）による後期融合モデル

    分類ヘッドの入力は Concat[h2_t; h1_t; h2_a; h1_a; h2_v; h1_v]。
    """

    kind = ModelKind.LF_LSTM

    def parameter_shapes(self) -> Dict[str, Tuple[int, int]]:
        h = self.config.hidden
        shapes: Dict[str, Tuple[int, int]] = {}
        for m in self.modalities:
            for layer, width in (("lstm1", self.input_dim(m)), ("lstm2", h)):
                for g in "ifoc":
                    shapes[f"{layer}.{m.letter}.W_{g}"] = (width + h, h)
                    shapes[f"{layer}.{m.letter}.b_{g}"] = (1, h)
            shapes[f"norm.{m.letter}.gain"] = (1, h)
            shapes[f"norm.{m.letter}.bias"] = (1, h)
        fused = 2 * h * len(self.modalities)
        shapes["head.norm.gain"] = (1, fused)
        shapes["head.norm.bias"] = (1, fused)
        shapes.update(_head_shapes(fused, self.config.head_hidden))
        return shapes

    def lstm_params(self, prefix: str) -> LstmParams:
        return LstmParams(*(self.params[f"{prefix}.{k}"]
                            for k in ("W_i", "W_f", "W_o", "W_c", "b_i", "b_f", "b_o", "b_c")))

    def _build(self, tape, inputs, rng):
        h = self.config.hidden
        finals = []
        for m in self.modalities:
            x = tape.constant(inputs[m])
            h1, states = _run_lstm(tape, x, _watch_lstm(tape, self.params, f"lstm1.{m.letter}"), h)
            normed = tape.layer_norm(tape.stack_rows(states),
                                     tape.watch(f"norm.{m.letter}.gain", self.params[f"norm.{m.letter}.gain"]),
                                     tape.watch(f"norm.{m.letter}.bias", self.params[f"norm.{m.letter}.bias"]))
            h2, _ = _run_lstm(tape, normed, _watch_lstm(tape, self.params, f"lstm2.{m.letter}"), h)
            finals.extend([h2, h1])
        fused = tape.layer_norm(tape.concat_cols(finals),
                                tape.watch("head.norm.gain", self.params["head.norm.gain"]),
                                tape.watch("head.norm.bias", self.params["head.norm.bias"]))
        return _head(tape, self.params, fused, self.config.head_hidden, self.config.dropout, rng)


# ---------------------------------------------------------------------------
# 関数形式の順伝播
# ---------------------------------------------------------------------------

def _trimodal(model: FusionModel, x_t, x_a, x_v) -> Tuple[np.ndarray, GradTape]:
    if model.modalities != MODALITY_ORDER:
        raise ValidationError(f"{model.label}: 3モダリティのモデルが必要です")
    return model.forward({Modality.TEXT: x_t, Modality.AUDIO: x_a, Modality.VIDEO: x_v})


def _unimodal(model: FusionModel, x_m: SequenceInput, modality: Optional[Modality]) -> np.ndarray:
    if not model.is_unimodal:
        raise ValidationError(f"{model.label}: 単一モダリティのモデルが必要です")
    modality = modality or model.modalities[0]
    if isinstance(x_m, FeatureSequence) and x_m.modality is not modality:
        raise ValidationError(f"{model.label}: {x_m.modality.value} 系列は入力できません")
    return model.forward({model.modalities[0]: x_m})[0]


def mult_forward(model: MultModel, x_t: SequenceInput, x_a: SequenceInput,
                 x_v: SequenceInput) -> Tuple[np.ndarray, GradTape]:
    return _trimodal(model, x_t, x_a, x_v)


def mult_unimodal_forward(model: MultModel, x_m: SequenceInput) -> np.ndarray:
    """CABを自己注意に置き換えた単一モダリティ版"""
    return _unimodal(model, x_m, None)


def lf_lstm_forward(model: LfLstmModel, x_t: SequenceInput, x_a: SequenceInput,
                    x_v: SequenceInput) -> Tuple[np.ndarray, GradTape]:
    return _trimodal(model, x_t, x_a, x_v)


def lf_lstm_unimodal_forward(model: LfLstmModel, x_m: SequenceInput) -> np.ndarray:
    return _unimodal(model, x_m, None)


# ---------------------------------------------------------------------------
# チェックポイント
# ---------------------------------------------------------------------------

MODEL_CLASSES = {ModelKind.MULT: MultModel, ModelKind.LF_LSTM: LfLstmModel}


def config_from_dict(kind: Union[ModelKind, str], document: Dict):
    kind = ModelKind(kind)
    try:
        if kind is ModelKind.MULT:
            return MultConfig(**document)
        return LstmConfig(**document)
    except TypeError as e:
        raise ValidationError(f"{kind.value} の設定が不正です: {e}") from e


def model_from_document(document: Dict) -> FusionModel:
    if document.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"チェックポイント形式ではありません (format={document.get('format')!r})")
    if document.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"未対応のチェックポイントversionです ({document.get('version')!r})")
    try:
        kind = ModelKind(document["kind"])
        config = config_from_dict(kind, document["config"])
        params = {}
        for entry in document["params"]:
            shape = tuple(entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ValidationError(f"パラメータ {entry['name']}: 値の数が形状 {shape} と一致しません")
            params[entry["name"]] = values.reshape(shape)
    except (KeyError, ValueError) as e:
        if isinstance(e, ValidationError):
            raise
        raise ValidationError(f"チェックポイントが不正です: {e}") from e
    return MODEL_CLASSES[kind](config, params)


def save_checkpoint(model: FusionModel, path: Union[str, Path]) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(model.to_document(), f, ensure_ascii=False, indent=2)
            f.write("\n")
    except OSError as e:
        raise file_error(path, e) from e


def load_checkpoint(path: Union[str, Path]) -> FusionModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: JSONとして読めません (行 {e.lineno}, 列 {e.colno})") from e
    except OSError as e:
        raise file_error(path, e) from e
    return model_from_document(document)
