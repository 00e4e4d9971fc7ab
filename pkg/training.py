"""
学習と評価
交差エントロピー損失・SGD・学習ループと、Accuracy / マクロF1 / MAE による評価
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from sklearn import metrics

from alignment import is_aligned, unaligned_segments
from errors import DimensionError, NumericError, ValidationError
from fusion import FusionMode, FusionModel, LABEL_TO_INDEX, INDEX_TO_LABEL, ModelKind, NUM_CLASSES
from numkernel import Matrix, check_finite
from sequences import LABELS, Corpus, Modality, MODALITY_ORDER, Split, parse_modalities


@dataclass
class TrainConfig:
    """学習設定"""
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.1
    seed: int = 7
    model: ModelKind = ModelKind.MULT
    modalities: Tuple[Modality, ...] = MODALITY_ORDER
    fusion: FusionMode = FusionMode.CONCAT

    def __post_init__(self):
        self.model = ModelKind(self.model)
        self.fusion = FusionMode(self.fusion)
        if isinstance(self.modalities, str):
            self.modalities = parse_modalities(self.modalities) if self.modalities else ()
        self.modalities = tuple(m for m in MODALITY_ORDER if m in set(self.modalities))

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValidationError(f"epochs は1以上が必要です ({self.epochs})")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size は1以上が必要です ({self.batch_size})")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValidationError(f"learning_rate は正の値が必要です ({self.learning_rate})")
        if not self.modalities:
            raise ValidationError("モダリティマスクが空です")
        return self

    def to_dict(self) -> Dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "model": self.model.value,
            "modalities": "".join(m.letter for m in self.modalities),
            "fusion": self.fusion.value,
        }


@dataclass
class MetricsReport:
    """評価結果（F1はマクロ平均）"""
    model: str
    accuracy: float
    f1: float
    mae: float
    n: int
    split: str = Split.TEST.value
    confusion: List[List[int]] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError(f"{self.model}: accuracy が [0,1] の範囲外です ({self.accuracy})")
        if not 0.0 <= self.f1 <= 1.0:
            raise ValidationError(f"{self.model}: f1 が [0,1] の範囲外です ({self.f1})")
        if self.mae < 0:
            raise ValidationError(f"{self.model}: mae は0以上が必要です ({self.mae})")

    def to_dict(self) -> Dict:
        return {
            "model": self.model,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "f1_average": "macro",
            "mae": self.mae,
            "n": self.n,
            "split": self.split,
            "confusion": self.confusion,
        }

    @classmethod
    def from_dict(cls, document: Mapping) -> "MetricsReport":
        try:
            return cls(
                model=str(document["model"]),
                accuracy=float(document["accuracy"]),
                f1=float(document["f1"]),
                mae=float(document["mae"]),
                n=int(document.get("n", 0)),
                split=str(document.get("split", Split.TEST.value)),
                confusion=[list(map(int, row)) for row in document.get("confusion", [])],
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ValidationError):
                raise
            raise ValidationError(f"MetricsReport が不正です: {e}") from e

    @staticmethod
    def table_header() -> str:
        return f"{'model':<14}{'Accuracy':>10}{'F1':>10}{'MAE':>10}{'n':>6}"

    def table_row(self) -> str:
        return f"{self.model:<14}{self.accuracy:>10.4f}{self.f1:>10.4f}{self.mae:>10.4f}{self.n:>6d}"


# ---------------------------------------------------------------------------
# 損失
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits, label: int) -> Tuple[float, np.ndarray]:
    """softmax交差エントロピーと、ロジットに対する勾配 (softmax - one-hot)"""
    logits = check_finite("logits", np.asarray(logits, dtype=np.float64).reshape(-1))
    if logits.shape != (NUM_CLASSES,):
        raise DimensionError("cross_entropy_loss", logits.shape, (NUM_CLASSES,))
    if label not in LABEL_TO_INDEX:
        raise ValidationError(f"label={label} は {{-1,0,1}} に含まれません")
    index = LABEL_TO_INDEX[label]
    shifted = logits - logits.max()
    log_sum = np.log(np.exp(shifted).sum())
    probs = np.exp(shifted - log_sum)
    grad = probs.copy()
    grad[index] -= 1.0
    return float(log_sum - shifted[index]), grad


# ---------------------------------------------------------------------------
# 評価指標
# ---------------------------------------------------------------------------

def _check_pair(y_true: Sequence[int], y_pred: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.size == 0:
        raise ValidationError("評価対象が空です")
    if y_true.size != y_pred.size:
        raise ValidationError(f"y_true と y_pred の長さが異なります ({y_true.size} vs {y_pred.size})")
    unknown = sorted(set(np.concatenate([y_true, y_pred]).tolist()) - set(LABELS))
    if unknown:
        raise ValidationError(f"不明なラベル値: {unknown}")
    return y_true, y_pred


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int]) -> np.ndarray:
    """3×3の混同行列（行 = 正解クラス, 列 = 予測クラス）"""
    y_true, y_pred = _check_pair(y_true, y_pred)
    return metrics.confusion_matrix(y_true, y_pred, labels=list(LABELS))


def accuracy(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    y_true, y_pred = _check_pair(y_true, y_pred)
    return float(metrics.accuracy_score(y_true, y_pred))


def f1(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    """正解側に現れるクラスについてのマクロ平均F1"""
    y_true, y_pred = _check_pair(y_true, y_pred)
    present = np.unique(y_true).tolist()
    return float(metrics.f1_score(y_true, y_pred, labels=present, average="macro", zero_division=0))


def mae(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    """ラベル値 {-1,0,+1} 上の平均絶対誤差"""
    y_true, y_pred = _check_pair(y_true, y_pred)
    return float(metrics.mean_absolute_error(y_true, y_pred))


# ---------------------------------------------------------------------------
# 最適化
# ---------------------------------------------------------------------------

class Optimizer(Protocol):
    def step(self, params: Dict[str, Matrix], grads: Mapping[str, Matrix]) -> Dict[str, Matrix]:
        ...


def sgd_step(params: Mapping[str, Matrix], grads: Mapping[str, Matrix], lr: float) -> Dict[str, Matrix]:
    """p <- p - lr * g（新しい辞書を返す）"""
    updated = {}
    for name, value in params.items():
        if name not in grads:
            raise ValidationError(f"パラメータ {name} の勾配がありません")
        grad = np.asarray(grads[name], dtype=np.float64)
        value = np.asarray(value, dtype=np.float64)
        if grad.shape != value.shape:
            raise DimensionError(f"sgd_step.{name}", value.shape, grad.shape)
        updated[name] = value - lr * grad
    return updated


class SGD:
    """モーメンタムなしの確率的勾配降下法"""

    def __init__(self, learning_rate: float):
        if learning_rate <= 0:
            raise ValidationError(f"learning_rate は正の値が必要です ({learning_rate})")
        self.learning_rate = learning_rate

    def step(self, params: Dict[str, Matrix], grads: Mapping[str, Matrix]) -> Dict[str, Matrix]:
        return sgd_step(params, grads, self.learning_rate)


# ---------------------------------------------------------------------------
# 学習ループ
# ---------------------------------------------------------------------------

def _check_model_corpus(model, corpus: Corpus) -> None:
    config = getattr(model, "config", None)
    if config is not None and tuple(config.dims) != corpus.dims_tuple():
        raise DimensionError("model/corpus dims", tuple(config.dims), corpus.dims_tuple())


def train(model: FusionModel, corpus: Corpus, config: TrainConfig,
          optimizer: Optional[Optimizer] = None,
          verbose: bool = False) -> Tuple[FusionModel, List[float]]:
    """学習済みモデルとエポックごとの平均損失を返す

    シャッフルとdropoutマスクは config.seed から決定的に生成する。
    """
    config.validate()
    if config.modalities != model.modalities:
        raise ValidationError(
            f"モダリティマスク {config.to_dict()['modalities']} がモデル {model.label} と一致しません")
    if config.model is not model.kind:
        raise ValidationError(f"モデル種別 {config.model.value} がモデル {model.label} と一致しません")
    _check_model_corpus(model, corpus)
    if not is_aligned(corpus):
        first = unaligned_segments(corpus)[0]
        raise ValidationError(f"セグメント {first} が未整列です: 先に align_corpus を実行してください")
    segments = corpus.by_split(Split.TRAIN)
    if not segments:
        raise ValidationError("train 分割が空です")

    rng = np.random.default_rng(config.seed)
    optimizer = optimizer or SGD(config.learning_rate)
    current = model.copy()
    params = current.params
    history: List[float] = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(segments))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [segments[k] for k in order[start:start + config.batch_size]]
            summed = {name: np.zeros_like(value) for name, value in params.items()}
            for segment in batch:
                logits, tape = current.forward(segment.sequences, rng=rng)
                loss, grad = cross_entropy_loss(logits, segment.label)
                total_loss += loss
                correct += INDEX_TO_LABEL[int(np.argmax(logits))] == segment.label
                for name, g in tape.backward(grad).items():
                    summed[name] += g
            grads = {name: g / len(batch) for name, g in summed.items()}
            params = optimizer.step(params, grads)
            current.params = params
        mean_loss = total_loss / len(segments)
        if not np.isfinite(mean_loss):
            raise NumericError(f"{model.label}: epoch {epoch} で損失が非有限になりました")
        history.append(mean_loss)
        if verbose:
            print(f"📊 {model.label} epoch {epoch}/{config.epochs} "
                  f"loss={mean_loss:.4f} train_acc={correct / len(segments):.3f}")

    return model.with_params(params), history


def evaluate(model, corpus: Corpus, split: Union[Split, str] = Split.TEST,
             modalities: Optional[Sequence[Modality]] = None) -> MetricsReport:
    """分割内の各セグメントを予測してMetricsReportを作る"""
    split = Split(split)
    if modalities is not None and hasattr(model, "modalities"):
        wanted = tuple(m for m in MODALITY_ORDER if m in set(modalities))
        if wanted != tuple(model.modalities):
            raise ValidationError(f"モダリティマスクがモデル {model.label} と一致しません")
    _check_model_corpus(model, corpus)
    segments = corpus.by_split(split)
    if not segments:
        raise ValidationError(f"{split.value} 分割が空です")
    y_true = [s.label for s in segments]
    y_pred = [model.predict(s) for s in segments]
    return MetricsReport(
        model=getattr(model, "label", "model"),
        accuracy=accuracy(y_true, y_pred),
        f1=f1(y_true, y_pred),
        mae=mae(y_true, y_pred),
        n=len(segments),
        split=split.value,
        confusion=confusion_matrix(y_true, y_pred).tolist(),
    )
