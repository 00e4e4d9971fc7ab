"""
マルチモーダルコーパスのデータモデルと入出力
時刻付き特徴系列・セグメント・コーパス、合成コーパス生成、アノテーション集約を扱う
"""

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ValidationError, file_error

LABELS = (-1, 0, 1)
ANNOTATORS_PER_SEGMENT = 5
CORPUS_FORMAT = "multimodal-sentiment-corpus"
CORPUS_VERSION = 1
TIME_TOLERANCE = 1e-9


class Modality(Enum):
    """モダリティ"""
    TEXT = "text"
    AUDIO = "audio"
    VIDEO = "video"

    @property
    def letter(self) -> str:
        return self.value[0]

    @classmethod
    def from_letter(cls, letter: str) -> "Modality":
        for modality in cls:
            if modality.letter == letter.lower():
                return modality
        raise ValidationError(f"不明なモダリティ: '{letter}' (t/a/v のいずれか)")


MODALITY_ORDER: Tuple[Modality, ...] = (Modality.TEXT, Modality.AUDIO, Modality.VIDEO)


def parse_modalities(mask: str) -> Tuple[Modality, ...]:
    """'tva' のような文字列を正規順のモダリティ列に変換"""
    if not mask:
        raise ValidationError("モダリティマスクが空です")
    chosen = {Modality.from_letter(ch) for ch in mask}
    return tuple(m for m in MODALITY_ORDER if m in chosen)


def modality_label(modalities: Sequence[Modality]) -> str:
    """モダリティ列の表示名 (TVA, T, A, V)"""
    order = {Modality.TEXT: 0, Modality.VIDEO: 1, Modality.AUDIO: 2}
    return "".join(m.letter.upper() for m in sorted(modalities, key=order.__getitem__))


class Split(Enum):
    """データ分割"""
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


class SignalMode(Enum):
    """合成コーパスのラベル信号の埋め込み方"""
    UNIMODAL = "unimodal"
    CROSSMODAL = "crossmodal"


@dataclass(frozen=True)
class FeatureSequence:
    """1モダリティの時刻付き特徴行列"""
    modality: Modality
    timestamps: np.ndarray  # (n, 2) [start_s, end_s]
    features: np.ndarray    # (n, dim)

    def __post_init__(self):
        timestamps = np.array(self.timestamps, dtype=np.float64).reshape(-1, 2)
        features = np.array(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(len(timestamps), -1) if features.size else np.zeros((0, 0))
        timestamps.flags.writeable = False
        features.flags.writeable = False
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "features", features)

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def midpoints(self) -> np.ndarray:
        return self.timestamps.mean(axis=1)

    def validate(self, where: str = "") -> None:
        prefix = f"{where}/{self.modality.value}"
        if self.features.shape[0] != self.timestamps.shape[0]:
            raise ValidationError(
                f"{prefix}: 特徴行数({self.features.shape[0]}) != タイムスタンプ数({self.timestamps.shape[0]})")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError(f"{prefix}: 特徴に非有限値があります")
        if not len(self.timestamps):
            return
        starts, ends = self.timestamps[:, 0], self.timestamps[:, 1]
        if not np.all(np.isfinite(self.timestamps)):
            raise ValidationError(f"{prefix}: タイムスタンプに非有限値があります")
        if np.any(ends <= starts):
            raise ValidationError(f"{prefix}: end_s > start_s を満たさない区間があります")
        if np.any(np.diff(starts) <= 0):
            raise ValidationError(f"{prefix}: start_s が狭義単調増加ではありません")
        if np.any(starts[1:] < ends[:-1] - TIME_TOLERANCE):
            raise ValidationError(f"{prefix}: 区間が重なっています")


@dataclass(frozen=True)
class Segment:
    """ラベル付きマルチモーダルセグメント"""
    id: str
    label: int
    duration_s: float
    sequences: Dict[Modality, FeatureSequence]

    def sequence(self, modality: Modality) -> FeatureSequence:
        return self.sequences[modality]

    def features(self, modality: Modality) -> np.ndarray:
        return self.sequences[modality].features

    def validate(self) -> None:
        if self.label not in LABELS:
            raise ValidationError(f"セグメント {self.id}: label={self.label} は {{-1,0,1}} に含まれません")
        if not (np.isfinite(self.duration_s) and self.duration_s > 0):
            raise ValidationError(f"セグメント {self.id}: duration_s は正の値が必要です ({self.duration_s})")
        for modality in MODALITY_ORDER:
            if modality not in self.sequences:
                raise ValidationError(f"セグメント {self.id}: {modality.value} 系列がありません")
            sequence = self.sequences[modality]
            sequence.validate(self.id)
            if len(sequence.timestamps) and (
                    sequence.timestamps.min() < -TIME_TOLERANCE
                    or sequence.timestamps.max() > self.duration_s + TIME_TOLERANCE):
                raise ValidationError(
                    f"セグメント {self.id}/{modality.value}: タイムスタンプが [0, {self.duration_s}] の範囲外です")

    def with_sequences(self, sequences: Dict[Modality, FeatureSequence]) -> "Segment":
        return Segment(self.id, self.label, self.duration_s, dict(sequences))

    def with_label(self, label: int) -> "Segment":
        return Segment(self.id, label, self.duration_s, self.sequences)


@dataclass(frozen=True)
class Corpus:
    """コーパス（セグメント集合と分割割り当て）"""
    segments: Tuple[Segment, ...]
    dims: Dict[Modality, int]
    splits: Dict[str, Split]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def dims_tuple(self) -> Tuple[int, int, int]:
        return tuple(self.dims[m] for m in MODALITY_ORDER)

    def by_split(self, split: Union[Split, str]) -> List[Segment]:
        split = Split(split)
        return [s for s in self.segments if self.splits[s.id] is split]

    def validate(self) -> "Corpus":
        for modality in MODALITY_ORDER:
            if self.dims.get(modality, 0) <= 0:
                raise ValidationError(f"dims.{modality.value} は正の整数が必要です")
        ids = [s.id for s in self.segments]
        duplicates = [i for i, c in Counter(ids).items() if c > 1]
        if duplicates:
            raise ValidationError(f"セグメントIDが重複しています: {duplicates[0]}")
        if set(self.splits) != set(ids):
            missing = sorted(set(ids) - set(self.splits)) or sorted(set(self.splits) - set(ids))
            raise ValidationError(f"分割割り当てがセグメント集合と一致しません: {missing[0]}")
        for segment in self.segments:
            segment.validate()
            for modality in MODALITY_ORDER:
                dim = segment.sequences[modality].dim
                if dim != self.dims[modality]:
                    raise ValidationError(
                        f"セグメント {segment.id}/{modality.value}: 次元 {dim} が宣言 {self.dims[modality]} と一致しません")
        return self

    def with_segments(self, segments: Iterable[Segment]) -> "Corpus":
        return Corpus(tuple(segments), dict(self.dims), dict(self.splits))


# ---------------------------------------------------------------------------
# 入出力
# ---------------------------------------------------------------------------

def _sequence_to_dict(sequence: FeatureSequence) -> Dict:
    return {
        "timestamps": sequence.timestamps.tolist(),
        "features": sequence.features.tolist(),
    }


def _segment_to_dict(segment: Segment, split: Split) -> Dict:
    document = {
        "id": segment.id,
        "label": int(segment.label),
        "duration_s": float(segment.duration_s),
        "split": split.value,
    }
    for modality in MODALITY_ORDER:
        document[modality.value] = _sequence_to_dict(segment.sequences[modality])
    return document


def corpus_to_text(corpus: Corpus) -> str:
    """1セグメント1行のJSON文書に変換"""
    header = json.dumps({
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "dims": {m.value: int(corpus.dims[m]) for m in MODALITY_ORDER},
    }, ensure_ascii=False)
    lines = [json.dumps(_segment_to_dict(s, corpus.splits[s.id]), ensure_ascii=False)
             for s in corpus.segments]
    body = ",\n".join(lines)
    return header[:-1] + ', "segments": [\n' + body + ("\n" if lines else "") + "]}\n"


def save_corpus(corpus: Corpus, path: Union[str, Path]) -> None:
    """コーパスをファイルに保存"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(corpus_to_text(corpus))
    except OSError as e:
        raise file_error(path, e) from e


def _field(document: Dict, key: str, where: str):
    try:
        return document[key]
    except (KeyError, TypeError):
        raise ValidationError(f"{where}: フィールド '{key}' がありません") from None


def _sequence_from_dict(document: Dict, modality: Modality, dim: int, where: str) -> FeatureSequence:
    timestamps = _field(document, "timestamps", where)
    features = _field(document, "features", where)
    try:
        ts = np.asarray(timestamps, dtype=np.float64).reshape(-1, 2)
        feats = np.asarray(features, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{where}: 数値配列として解釈できません ({e})") from None
    if feats.size == 0:
        feats = np.zeros((0, dim))
    if feats.ndim != 2:
        raise ValidationError(f"{where}: features は行の配列である必要があります")
    return FeatureSequence(modality, ts, feats)


def corpus_from_document(document: Dict) -> Corpus:
    """JSON文書からコーパスを構築して検証"""
    dims_doc = _field(document, "dims", "corpus")
    try:
        dims = {m: int(_field(dims_doc, m.value, "corpus.dims")) for m in MODALITY_ORDER}
    except (TypeError, ValueError):
        raise ValidationError("corpus.dims: 整数が必要です") from None
    segments: List[Segment] = []
    splits: Dict[str, Split] = {}
    for position, item in enumerate(_field(document, "segments", "corpus")):
        segment_id = str(_field(item, "id", f"segments[{position}]"))
        where = f"セグメント {segment_id}"
        try:
            split = Split(_field(item, "split", where))
        except ValueError:
            raise ValidationError(f"{where}: split は train/valid/test のいずれかです") from None
        label = _field(item, "label", where)
        if not isinstance(label, int) or isinstance(label, bool):
            raise ValidationError(f"{where}: label={label!r} は {{-1,0,1}} に含まれません")
        sequences = {
            m: _sequence_from_dict(_field(item, m.value, where), m, dims[m], f"{where}/{m.value}")
            for m in MODALITY_ORDER
        }
        segments.append(Segment(segment_id, label, float(_field(item, "duration_s", where)), sequences))
        splits[segment_id] = split
    return Corpus(tuple(segments), dims, splits).validate()


def load_corpus(path: Union[str, Path]) -> Corpus:
    """コーパスファイルを読み込み、全不変条件を検証"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: {e.lineno}行{e.colno}列で解析エラー ({e.msg})") from None
    except OSError as e:
        raise file_error(path, e) from None
    return corpus_from_document(document)


# ---------------------------------------------------------------------------
# 統計
# ---------------------------------------------------------------------------

def format_duration(seconds: float) -> str:
    """'02h:47min:27s' 形式"""
    total = int(round(seconds))
    return f"{total // 3600:02d}h:{(total % 3600) // 60:02d}min:{total % 60:02d}s"


@dataclass
class CorpusStats:
    """コーパス統計"""
    total_segments: int
    label_counts: Dict[int, int]
    average_duration_s: Optional[float]
    total_duration_s: float
    dims: Dict[str, int]
    split_counts: Dict[str, int]

    @property
    def positive(self) -> int:
        return self.label_counts[1]

    @property
    def negative(self) -> int:
        return self.label_counts[-1]

    @property
    def neutral(self) -> int:
        return self.label_counts[0]

    @property
    def subjective_segments(self) -> int:
        """中立を含むラベル付きセグメント数"""
        return self.positive + self.negative + self.neutral

    def to_dict(self) -> Dict:
        return {
            "total_segments": self.total_segments,
            "positive": self.positive,
            "negative": self.negative,
            "neutral": self.neutral,
            "subjective_segments": self.subjective_segments,
            "average_duration_s": self.average_duration_s,
            "total_duration_s": self.total_duration_s,
            "total_duration": format_duration(self.total_duration_s),
            "dims": dict(self.dims),
            "split_counts": dict(self.split_counts),
        }


def corpus_stats(corpus: Corpus) -> CorpusStats:
    """ラベル別件数・平均長・次元などの統計"""
    labels = Counter(s.label for s in corpus.segments)
    durations = np.array([s.duration_s for s in corpus.segments], dtype=np.float64)
    splits = Counter(corpus.splits[s.id].value for s in corpus.segments)
    return CorpusStats(
        total_segments=len(corpus.segments),
        label_counts={label: labels.get(label, 0) for label in LABELS},
        average_duration_s=float(durations.mean()) if len(durations) else None,
        total_duration_s=float(durations.sum()),
        dims={m.value: corpus.dims[m] for m in MODALITY_ORDER},
        split_counts={s.value: splits.get(s.value, 0) for s in Split},
    )


# ---------------------------------------------------------------------------
# アノテーション
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnnotationSet:
    """1セグメントに対する5名のアノテーション"""
    segment_id: str
    labels: Tuple[int, ...]

    def validate(self) -> "AnnotationSet":
        if len(self.labels) != ANNOTATORS_PER_SEGMENT:
            raise ValidationError(
                f"セグメント {self.segment_id}: アノテーター数 {len(self.labels)} (必要数 {ANNOTATORS_PER_SEGMENT})")
        for label in self.labels:
            if label not in LABELS:
                raise ValidationError(f"セグメント {self.segment_id}: label={label} は {{-1,0,1}} に含まれません")
        return self


def aggregate_annotations(annotation: AnnotationSet) -> Tuple[int, float]:
    """多数決でラベルを決定し、一致率を返す（同数は中立0）"""
    annotation.validate()
    counts = Counter(annotation.labels)
    ranked = counts.most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        label = 0
    else:
        label = ranked[0][0]
    return label, counts.get(label, 0) / ANNOTATORS_PER_SEGMENT


def fleiss_kappa(annotations: Sequence[AnnotationSet]) -> float:
    """コーパス全体のFleiss' kappa"""
    if not annotations:
        raise ValidationError("fleiss_kappa: アノテーションがありません")
    raters = ANNOTATORS_PER_SEGMENT
    table = np.array([[Counter(a.validate().labels).get(label, 0) for label in LABELS]
                      for a in annotations], dtype=np.float64)
    per_item = ((table ** 2).sum(axis=1) - raters) / (raters * (raters - 1))
    observed = per_item.mean()
    proportions = table.sum(axis=0) / (len(annotations) * raters)
    expected = float((proportions ** 2).sum())
    if expected >= 1.0:
        return 1.0
    return float((observed - expected) / (1.0 - expected))


def load_annotations(path: Union[str, Path]) -> List[AnnotationSet]:
    """[{"id": ..., "labels": [...]}, ...] 形式のファイルを読み込み"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: {e.lineno}行{e.colno}列で解析エラー ({e.msg})") from None
    except OSError as e:
        raise file_error(path, e) from None
    sets = []
    for position, item in enumerate(document):
        segment_id = str(_field(item, "id", f"annotations[{position}]"))
        labels = tuple(int(v) for v in _field(item, "labels", f"annotations[{position}]"))
        sets.append(AnnotationSet(segment_id, labels).validate())
    return sets


def apply_annotations(corpus: Corpus, annotations: Sequence[AnnotationSet]) -> Tuple[Corpus, Dict[str, float]]:
    """集約ラベルでコーパスのラベルを置き換え、セグメント別一致率を返す"""
    decided = {a.segment_id: aggregate_annotations(a) for a in annotations}
    unknown = sorted(set(decided) - {s.id for s in corpus.segments})
    if unknown:
        raise ValidationError(f"セグメント {unknown[0]}: コーパスに存在しません")
    segments = [s.with_label(decided[s.id][0]) if s.id in decided else s for s in corpus.segments]
    return corpus.with_segments(segments), {k: v[1] for k, v in decided.items()}


# ---------------------------------------------------------------------------
# 合成コーパス
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """合成コーパス生成設定"""
    segments: int = 300
    mode: SignalMode = SignalMode.CROSSMODAL
    dims: Tuple[int, int, int] = (768, 80, 74)
    planted: Tuple[Modality, ...] = ()
    amplitude: float = 1.0
    carrier: float = 0.5
    noise: float = 0.5
    neutral_rate: float = 0.2
    mean_duration_s: float = 3.0
    word_rate_hz: float = 2.0
    audio_rate_factor: float = 10.0
    video_rate_factor: float = 5.0
    split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        self.mode = SignalMode(self.mode)
        self.dims = tuple(int(d) for d in self.dims)
        self.planted = tuple(Modality(m) for m in self.planted)

    @property
    def planted_modalities(self) -> Tuple[Modality, ...]:
        if self.planted:
            return self.planted
        if self.mode is SignalMode.UNIMODAL:
            return (Modality.TEXT,)
        return (Modality.TEXT, Modality.AUDIO)

    def validate(self) -> "SynthConfig":
        if self.segments < 1:
            raise ValidationError(f"segments は1以上が必要です ({self.segments})")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError(f"dims は正の整数3つが必要です ({self.dims})")
        expected = 1 if self.mode is SignalMode.UNIMODAL else 2
        if len(self.planted_modalities) != expected or len(set(self.planted_modalities)) != expected:
            raise ValidationError(f"{self.mode.value} モードには異なるモダリティが{expected}つ必要です")
        if not 0.0 <= self.neutral_rate < 1.0:
            raise ValidationError(f"neutral_rate は [0,1) が必要です ({self.neutral_rate})")
        if min(self.noise, self.carrier) < 0 or self.amplitude <= 0:
            raise ValidationError("amplitude は正、noise/carrier は非負が必要です")
        if min(self.mean_duration_s, self.word_rate_hz, self.audio_rate_factor, self.video_rate_factor) <= 0:
            raise ValidationError("長さ・レート設定は正の値が必要です")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0 \
                or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValidationError(f"split_fractions は合計1の非負3値が必要です ({self.split_fractions})")
        return self

    def to_dict(self) -> Dict:
        return {
            "segments": self.segments,
            "mode": self.mode.value,
            "dims": list(self.dims),
            "planted": [m.value for m in self.planted_modalities],
            "amplitude": self.amplitude,
            "carrier": self.carrier,
            "noise": self.noise,
            "neutral_rate": self.neutral_rate,
            "mean_duration_s": self.mean_duration_s,
            "word_rate_hz": self.word_rate_hz,
            "audio_rate_factor": self.audio_rate_factor,
            "video_rate_factor": self.video_rate_factor,
            "split_fractions": list(self.split_fractions),
        }


def _uniform_timestamps(count: int, duration_s: float) -> np.ndarray:
    edges = np.linspace(0.0, duration_s, count + 1)
    return np.stack([edges[:-1], edges[1:]], axis=1)


def _planted_features(rng: np.random.Generator, rows: int, dim: int, sign: int,
                      config: SynthConfig) -> np.ndarray:
    carrier = rng.normal(size=(rows, dim))
    carrier -= carrier.mean()
    noise = rng.normal(size=(rows, dim))
    return config.amplitude * sign + config.carrier * carrier + config.noise * noise


def _draw_latents(rng: np.random.Generator, config: SynthConfig) -> Tuple[int, Dict[Modality, int]]:
    """ラベルとモダリティ別の潜在符号を決める"""
    neutral = rng.random() < config.neutral_rate
    latents = {m: int(rng.choice((-1, 1))) for m in MODALITY_ORDER}  # 撹乱用の独立符号
    planted = config.planted_modalities
    if config.mode is SignalMode.UNIMODAL:
        label = 0 if neutral else latents[planted[0]]
        latents[planted[0]] = label
        return label, latents
    if neutral:
        for m in planted:
            latents[m] = 0
        return 0, latents
    return latents[planted[0]] * latents[planted[1]], latents


def _split_assignment(ids: List[str], fractions: Sequence[float],
                      rng: np.random.Generator) -> Dict[str, Split]:
    order = rng.permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_valid = int(round(fractions[1] * len(ids)))
    n_train = min(max(n_train, 1), len(ids))
    n_valid = min(n_valid, len(ids) - n_train)
    splits = {}
    for rank, position in enumerate(order):
        if rank < n_train:
            split = Split.TRAIN
        elif rank < n_train + n_valid:
            split = Split.VALID
        else:
            split = Split.TEST
        splits[ids[position]] = split
    return splits


def synth_generate(config: SynthConfig, seed: int) -> Corpus:
    """ラベル信号を埋め込んだ合成コーパスを生成（seedに対して決定的）"""
    config.validate()
    rng = np.random.default_rng(seed)
    dims = dict(zip(MODALITY_ORDER, config.dims))
    rates = {
        Modality.TEXT: config.word_rate_hz,
        Modality.AUDIO: config.word_rate_hz * config.audio_rate_factor,
        Modality.VIDEO: config.word_rate_hz * config.video_rate_factor,
    }
    segments = []
    for index in range(config.segments):
        label, latents = _draw_latents(rng, config)
        duration = float(config.mean_duration_s * rng.uniform(0.5, 1.5))
        sequences = {}
        for modality in MODALITY_ORDER:
            rows = max(1, int(round(duration * rates[modality])))
            sequences[modality] = FeatureSequence(
                modality,
                _uniform_timestamps(rows, duration),
                _planted_features(rng, rows, dims[modality], latents[modality], config),
            )
        segments.append(Segment(f"seg{index:04d}", label, duration, sequences))
    ids = [s.id for s in segments]
    return Corpus(tuple(segments), dims, _split_assignment(ids, config.split_fractions, rng)).validate()


def plant_word_audio(n_words: int, dim: int, frames_per_word: Union[int, Sequence[int]], seed: int,
                     frame_s: float = 0.01,
                     noise: float = 0.0) -> Tuple[np.ndarray, FeatureSequence, List[Tuple[float, float]]]:
    """強制アライメント用の合成データ: 単語プロトタイプ・音声系列・正解境界"""
    if n_words < 1 or dim < 1:
        raise ValidationError("n_words と dim は1以上が必要です")
    runs = [int(frames_per_word)] * n_words if np.isscalar(frames_per_word) else [int(r) for r in frames_per_word]
    if len(runs) != n_words or min(runs) < 1:
        raise ValidationError("frames_per_word は単語ごとに1以上が必要です")
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(size=(n_words, dim))
    frames = np.repeat(prototypes, runs, axis=0) + noise * rng.normal(size=(sum(runs), dim))
    edges = np.arange(sum(runs) + 1) * frame_s
    audio = FeatureSequence(Modality.AUDIO, np.stack([edges[:-1], edges[1:]], axis=1), frames)
    bounds = np.cumsum([0] + runs)
    boundaries = [(float(edges[bounds[k]]), float(edges[bounds[k + 1]])) for k in range(n_words)]
    return prototypes, audio, boundaries
