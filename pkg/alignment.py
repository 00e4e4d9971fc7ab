"""
モダリティ間アライメント
DTWによるテキスト-音声の強制アライメントと、ピボット（テキスト）時間軸への集約
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionError, ValidationError
from sequences import Corpus, FeatureSequence, Modality, MODALITY_ORDER, Segment

Distance = Callable[[np.ndarray, np.ndarray], float]


class CollapseFn(Enum):
    """ビン内の特徴ベクトルを1本にまとめる関数"""
    MEAN = "mean"
    MAX = "max"


@dataclass(frozen=True)
class AlignmentPath:
    """DTWの整列パス"""
    pairs: Tuple[Tuple[int, int], ...]
    total_cost: float

    def is_valid(self, len_a: int, len_b: int) -> bool:
        if not self.pairs or self.pairs[0] != (0, 0) or self.pairs[-1] != (len_a - 1, len_b - 1):
            return False
        for (i0, j0), (i1, j1) in zip(self.pairs, self.pairs[1:]):
            if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
                return False
        return True


@dataclass(frozen=True)
class WordTiming:
    """単語の時刻範囲"""
    word: str
    start_s: float
    end_s: float


def _as_series(x) -> Tuple[np.ndarray, bool]:
    if isinstance(x, FeatureSequence):
        return x.features, False
    array = np.asarray(x, dtype=np.float64)
    if array.ndim == 1:
        return array.reshape(-1, 1), True
    return array, False


def distance_matrix(a: np.ndarray, b: np.ndarray, dist: Optional[Distance] = None,
                    scalar: bool = False) -> np.ndarray:
    """全ペアの距離（既定はユークリッド距離、1次元では絶対差）"""
    if dist is None:
        return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    rows_a = a[:, 0] if scalar else a
    rows_b = b[:, 0] if scalar else b
    return np.array([[float(dist(x, y)) for y in rows_b] for x in rows_a], dtype=np.float64).reshape(len(a), len(b))


def dtw_align(a, b, dist: Optional[Distance] = None) -> AlignmentPath:
    """古典的な3方向DTWで最小コストの単調パスを求める

    同コストの場合は 対角 > aを進める > bを進める の順で選ぶ。
    """
    series_a, scalar_a = _as_series(a)
    series_b, scalar_b = _as_series(b)
    if len(series_a) == 0 or len(series_b) == 0:
        raise ValidationError(f"dtw_align: 空の系列は整列できません (長さ {len(series_a)}, {len(series_b)})")
    if series_a.shape[1] != series_b.shape[1]:
        raise DimensionError("dtw_align", series_a.shape, series_b.shape)
    cost = distance_matrix(series_a, series_b, dist, scalar=scalar_a and scalar_b)

    n, m = cost.shape
    # 累積コスト表（番兵として0行目・0列目を持つ）
    acc = [[math.inf] * (m + 1) for _ in range(n + 1)]
    acc[0][0] = 0.0
    for i, local in enumerate(cost.tolist(), start=1):
        above, row = acc[i - 1], acc[i]
        for j in range(1, m + 1):
            row[j] = local[j - 1] + min(above[j - 1], above[j], row[j - 1])

    i, j = n, m
    pairs = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        best = None
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            pi, pj = i - di, j - dj
            if pi < 1 or pj < 1:
                continue
            if best is None or acc[pi][pj] < acc[best[0]][best[1]]:
                best = (pi, pj)
        i, j = best
        pairs.append((i - 1, j - 1))
    return AlignmentPath(tuple(reversed(pairs)), float(acc[n][m]))


def forced_align_text_audio(words, audio: FeatureSequence,
                            tokens: Optional[Sequence[str]] = None) -> List[WordTiming]:
    """単語の音響プロトタイプを音声フレームにDTWで対応付けて単語時刻を得る

    複数の単語が同じフレームに対応した場合、そのフレームの区間を単語数で等分する。
    """
    prototypes = np.asarray(words, dtype=np.float64)
    if prototypes.ndim == 1:
        prototypes = prototypes.reshape(-1, 1)
    if len(prototypes) == 0:
        raise ValidationError("forced_align_text_audio: 単語が1つ以上必要です")
    if audio.rows == 0:
        raise ValidationError("forced_align_text_audio: 音声系列が空です")
    if prototypes.shape[1] != audio.dim:
        raise DimensionError("forced_align_text_audio", prototypes.shape, audio.features.shape)
    tokens = list(tokens) if tokens is not None else [f"w{k}" for k in range(len(prototypes))]
    if len(tokens) != len(prototypes):
        raise ValidationError("forced_align_text_audio: tokens と単語ベクトルの数が一致しません")

    path = dtw_align(prototypes, audio.features)
    frame_words: Dict[int, List[int]] = {}
    word_frames: Dict[int, List[int]] = {}
    for i, j in path.pairs:
        frame_words.setdefault(j, []).append(i)
        word_frames.setdefault(i, []).append(j)

    def share(i: int, j: int) -> Tuple[float, float]:
        owners = frame_words[j]
        start, end = audio.timestamps[j]
        edges = np.linspace(start, end, len(owners) + 1)
        position = owners.index(i)
        return edges[position], edges[position + 1]

    timings = []
    for i, token in enumerate(tokens):
        frames = word_frames[i]
        timings.append(WordTiming(token, float(share(i, frames[0])[0]), float(share(i, frames[-1])[1])))
    return timings


def pivot_align(pivot: FeatureSequence, other: FeatureSequence,
                collapse: Union[CollapseFn, str] = CollapseFn.MEAN) -> FeatureSequence:
    """他モダリティをピボットの区間ごとのビンに集約し、ピボットと同じ長さにする

    ビンへの割り当ては区間の中点で行い、空のビンはゼロベクトルとする。
    """
    collapse = CollapseFn(collapse)
    if pivot.rows == 0:
        raise ValidationError(f"pivot_align: ピボット系列({pivot.modality.value})が空です")
    out = np.zeros((pivot.rows, other.dim))
    if other.rows:
        starts, ends = pivot.timestamps[:, 0], pivot.timestamps[:, 1]
        mids = other.midpoints
        bins = np.searchsorted(starts, mids, side="right") - 1
        inside = (bins >= 0) & (mids < ends[np.clip(bins, 0, None)])
        bins, rows = bins[inside], other.features[inside]
        counts = np.bincount(bins, minlength=pivot.rows)
        filled = counts > 0
        if collapse is CollapseFn.MEAN:
            np.add.at(out, bins, rows)
            out[filled] /= counts[filled][:, None]
        else:
            pooled = np.full_like(out, -np.inf)
            np.maximum.at(pooled, bins, rows)
            out[filled] = pooled[filled]
    return FeatureSequence(other.modality, pivot.timestamps, out)


def align_segment(segment: Segment, collapse: Union[CollapseFn, str] = CollapseFn.MEAN,
                  pivot: Modality = Modality.TEXT) -> Segment:
    pivot_sequence = segment.sequences[pivot]
    if pivot_sequence.rows == 0:
        raise ValidationError(f"セグメント {segment.id}: ピボット({pivot.value})系列が空のため整列できません")
    aligned = {
        m: pivot_sequence if m is pivot else pivot_align(pivot_sequence, segment.sequences[m], collapse)
        for m in MODALITY_ORDER
    }
    return segment.with_sequences(aligned)


def align_corpus(corpus: Corpus, collapse: Union[CollapseFn, str] = CollapseFn.MEAN,
                 pivot: Modality = Modality.TEXT) -> Corpus:
    """全セグメントをピボット時間軸に揃える（各セグメントの3系列が同じ行数になる）"""
    return corpus.with_segments(align_segment(s, collapse, pivot) for s in corpus.segments).validate()


def unaligned_segments(corpus: Corpus) -> List[str]:
    return [s.id for s in corpus.segments
            if len({s.sequences[m].rows for m in MODALITY_ORDER}) != 1]


def is_aligned(corpus: Corpus) -> bool:
    """全セグメントでモダリティ間の行数が等しいか"""
    return not unaligned_segments(corpus)
