"""
コーパスデータモデルのテスト
検証・入出力・統計・アノテーション集約・合成生成
"""

import itertools
import json

import numpy as np
import pytest

from errors import ValidationError
from sequences import (
    AnnotationSet, Corpus, FeatureSequence, Modality, MODALITY_ORDER, Segment, SignalMode, Split,
    SynthConfig, aggregate_annotations, apply_annotations, corpus_from_document, corpus_stats,
    corpus_to_text, fleiss_kappa, format_duration, load_annotations, load_corpus, modality_label,
    parse_modalities, plant_word_audio, save_corpus, synth_generate,
)


def _sequence(modality, timestamps, dim=2):
    timestamps = np.asarray(timestamps, dtype=float)
    return FeatureSequence(modality, timestamps, np.zeros((len(timestamps), dim)))


def _segment(segment_id="s0", label=1, duration=2.0, rows=2):
    edges = np.linspace(0, duration, rows + 1)
    ts = np.stack([edges[:-1], edges[1:]], axis=1)
    return Segment(segment_id, label, duration, {m: _sequence(m, ts) for m in MODALITY_ORDER})


def _corpus(segments):
    return Corpus(tuple(segments), {m: 2 for m in MODALITY_ORDER}, {s.id: Split.TRAIN for s in segments})


# ---------------------------------------------------------------------------
# 検証
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("timestamps", [
    [[0.0, 1.0], [0.5, 1.5]],     # 重なり
    [[1.0, 2.0], [0.0, 1.0]],     # 開始時刻が減少
    [[0.0, 0.0]],                 # 長さ0
    [[0.0, np.inf]],              # 非有限
])
def test_feature_sequence_rejects_bad_timestamps(timestamps):
    with pytest.raises(ValidationError):
        _sequence(Modality.TEXT, timestamps).validate("s0")


def test_feature_sequence_does_not_alias_input():
    features = np.zeros((1, 2))
    sequence = FeatureSequence(Modality.AUDIO, [[0.0, 1.0]], features)
    features[0, 0] = 5.0
    assert sequence.features[0, 0] == 0.0
    assert features.flags.writeable


def test_segment_validation_names_segment():
    with pytest.raises(ValidationError, match="s9"):
        _segment("s9", label=2).validate()
    with pytest.raises(ValidationError, match="範囲外"):
        bad = _segment("s1")
        stretched = dict(bad.sequences)
        stretched[Modality.TEXT] = _sequence(Modality.TEXT, [[0.0, 3.0]])
        bad.with_sequences(stretched).validate()


def test_corpus_rejects_duplicates_and_dim_drift():
    with pytest.raises(ValidationError, match="重複"):
        _corpus([_segment("a"), _segment("a")]).validate()
    corpus = Corpus((_segment("a"),), {Modality.TEXT: 3, Modality.AUDIO: 2, Modality.VIDEO: 2},
                    {"a": Split.TRAIN})
    with pytest.raises(ValidationError, match="次元"):
        corpus.validate()


def test_parse_modalities_and_labels():
    assert parse_modalities("vt") == (Modality.TEXT, Modality.VIDEO)
    assert modality_label(MODALITY_ORDER) == "TVA"
    assert modality_label((Modality.AUDIO,)) == "A"
    for bad in ("", "x"):
        with pytest.raises(ValidationError):
            parse_modalities(bad)


# ---------------------------------------------------------------------------
# 入出力
# ---------------------------------------------------------------------------

def test_round_trip_is_bit_exact():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        config = SynthConfig(segments=3, dims=tuple(int(d) for d in rng.integers(1, 4, size=3)),
                             mean_duration_s=1.0)
        corpus = synth_generate(config, seed)
        text = corpus_to_text(corpus)
        restored = corpus_from_document(json.loads(text))
        assert corpus_to_text(restored) == text
        for a, b in zip(corpus.segments, restored.segments):
            for m in MODALITY_ORDER:
                assert np.array_equal(a.features(m), b.features(m))
                assert np.array_equal(a.sequences[m].timestamps, b.sequences[m].timestamps)


def test_save_and_load(tmp_path, small_corpus):
    path = tmp_path / "nested" / "corpus.json"
    save_corpus(small_corpus, path)
    loaded = load_corpus(path)
    assert loaded.dims == small_corpus.dims
    assert loaded.splits == small_corpus.splits
    assert path.read_text(encoding="utf-8").count("\n") == len(small_corpus.segments) + 2


def test_load_reports_parse_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"format": \n oops}', encoding="utf-8")
    with pytest.raises(ValidationError, match="2行"):
        load_corpus(path)


def test_empty_corpus_round_trip_and_stats():
    empty = Corpus((), {m: 2 for m in MODALITY_ORDER}, {}).validate()
    text = corpus_to_text(empty)
    assert corpus_to_text(corpus_from_document(json.loads(text))) == text
    stats = corpus_stats(empty)
    assert stats.total_segments == 0 and stats.average_duration_s is None
    assert corpus_stats(_corpus([_segment("s", duration=10.0)])).average_duration_s == 10.0


def test_document_with_bad_label_or_row_count_is_rejected():
    document = json.loads(corpus_to_text(_corpus([_segment("bad1")])))
    document["segments"][0]["label"] = 2
    with pytest.raises(ValidationError, match="bad1"):
        corpus_from_document(document)
    document["segments"][0]["label"] = 1
    document["segments"][0]["audio"]["timestamps"] = [[0.0, 1.0]]
    with pytest.raises(ValidationError, match="タイムスタンプ数"):
        corpus_from_document(document)


def test_load_rejects_missing_field():
    with pytest.raises(ValidationError, match="dims"):
        corpus_from_document({"segments": []})


# ---------------------------------------------------------------------------
# 統計
# ---------------------------------------------------------------------------

def test_table_one_fixture_is_echoed():
    labels = [1] * 130 + [-1] * 129 + [0] * 59
    dims = {Modality.TEXT: 768, Modality.AUDIO: 80, Modality.VIDEO: 74}
    segments = [
        Segment(f"s{k:03d}", label, 17.46,
                {m: FeatureSequence(m, np.zeros((0, 2)), np.zeros((0, dims[m]))) for m in MODALITY_ORDER})
        for k, label in enumerate(labels)
    ]
    corpus = Corpus(tuple(segments), dims, {s.id: Split.TRAIN for s in segments}).validate()
    stats = corpus_stats(corpus)
    assert stats.total_segments == 318
    assert (stats.positive, stats.negative, stats.neutral) == (130, 129, 59)
    assert round(stats.average_duration_s, 2) == 17.46
    assert stats.dims["text"] == 768
    assert stats.subjective_segments == 318
    assert stats.to_dict()["split_counts"] == {"train": 318, "valid": 0, "test": 0}


def test_format_duration():
    assert format_duration(10047) == "02h:47min:27s"
    assert format_duration(0) == "00h:00min:00s"


# ---------------------------------------------------------------------------
# アノテーション
# ---------------------------------------------------------------------------

def test_aggregate_majority_and_ties():
    assert aggregate_annotations(AnnotationSet("s", (1, 1, 1, 0, -1))) == (1, 0.6)
    assert aggregate_annotations(AnnotationSet("s", (1, 1, -1, -1, 0))) == (0, 0.2)
    assert aggregate_annotations(AnnotationSet("s", (-1,) * 5)) == (-1, 1.0)
    assert aggregate_annotations(AnnotationSet("s", (-1, -1, 0, 1, -1))) == (-1, 0.6)
    with pytest.raises(ValidationError, match="アノテーター数"):
        aggregate_annotations(AnnotationSet("s", (1, 1, 1)))


def test_aggregate_is_invariant_under_annotator_order():
    for labels in itertools.product((-1, 0, 1), repeat=5):
        expected = aggregate_annotations(AnnotationSet("s", labels))
        for order in itertools.permutations(labels):
            assert aggregate_annotations(AnnotationSet("s", order)) == expected, order


def test_fleiss_kappa_perfect_and_chance():
    perfect = [AnnotationSet(f"s{k}", (label,) * 5) for k, label in enumerate((-1, 0, 1, 1))]
    assert fleiss_kappa(perfect) == pytest.approx(1.0)
    mixed = [AnnotationSet("a", (1, 0, -1, 1, 0)), AnnotationSet("b", (-1, 0, 1, -1, 0))]
    assert fleiss_kappa(mixed) < 0.2


def test_apply_annotations(tmp_path):
    corpus = _corpus([_segment("a", 1), _segment("b", 1)])
    path = tmp_path / "ann.json"
    path.write_text(json.dumps([{"id": "b", "labels": [-1, -1, -1, 0, 1]}]), encoding="utf-8")
    relabelled, agreement = apply_annotations(corpus, load_annotations(path))
    assert [s.label for s in relabelled.segments] == [1, -1]
    assert agreement == {"b": 0.6}
    with pytest.raises(ValidationError, match="zz"):
        apply_annotations(corpus, [AnnotationSet("zz", (0,) * 5)])


# ---------------------------------------------------------------------------
# 合成コーパス
# ---------------------------------------------------------------------------

def test_synth_is_deterministic():
    config = SynthConfig(segments=10, dims=(3, 2, 2))
    assert corpus_to_text(synth_generate(config, 5)) == corpus_to_text(synth_generate(config, 5))
    assert corpus_to_text(synth_generate(config, 5)) != corpus_to_text(synth_generate(config, 6))


def test_synth_random_configs_produce_valid_corpora(rng):
    modalities = list(MODALITY_ORDER)
    for _ in range(25):
        mode = SignalMode.UNIMODAL if rng.random() < 0.5 else SignalMode.CROSSMODAL
        planted = rng.choice(len(modalities), size=1 if mode is SignalMode.UNIMODAL else 2, replace=False)
        config = SynthConfig(
            segments=int(rng.integers(1, 16)),
            mode=mode,
            dims=tuple(int(d) for d in rng.integers(1, 5, size=3)),
            planted=tuple(modalities[k] for k in planted),
            noise=float(rng.uniform(0.0, 1.0)),
            carrier=float(rng.uniform(0.0, 1.0)),
            neutral_rate=float(rng.uniform(0.0, 0.5)),
        )
        seed = int(rng.integers(0, 1000))
        corpus = synth_generate(config, seed)
        corpus.validate()
        stats = corpus_stats(corpus)
        assert stats.total_segments == config.segments
        assert sum(stats.split_counts.values()) == config.segments
        assert corpus.dims_tuple() == config.dims
        assert stats.split_counts["train"] >= 1
        for segment in corpus.segments:
            assert segment.label in (-1, 0, 1)
            for modality, dim in zip(MODALITY_ORDER, config.dims):
                assert segment.features(modality).shape[1] == dim
        assert corpus_to_text(synth_generate(config, seed)) == corpus_to_text(corpus)


def test_synth_split_fractions_and_neutral_rate():
    corpus = synth_generate(SynthConfig(segments=300, dims=(2, 2, 2)), 7)
    stats = corpus_stats(corpus)
    assert stats.split_counts == {"train": 210, "valid": 45, "test": 45}
    assert 0.12 <= stats.neutral / 300 <= 0.28


def test_crossmodal_label_is_product_of_planted_signs():
    config = SynthConfig(segments=60, dims=(3, 2, 2), noise=0.0, carrier=0.0)
    for segment in synth_generate(config, 11).segments:
        text = np.sign(segment.features(Modality.TEXT).mean())
        audio = np.sign(segment.features(Modality.AUDIO).mean())
        assert text * audio == segment.label
        assert abs(np.sign(segment.features(Modality.VIDEO).mean())) == 1


def _best_stump_accuracy(values, labels):
    """1次元しきい値で2分割し、各側を最頻ラベルで予測したときの最良正解率（全探索）"""
    values, labels = np.asarray(values), np.asarray(labels)
    points = np.unique(values)
    thresholds = np.concatenate([[-np.inf], (points[:-1] + points[1:]) / 2])
    best = 0
    for threshold in thresholds:
        left = values < threshold
        hits = sum(np.bincount(labels[side] + 1, minlength=3).max() for side in (left, ~left) if side.any())
        best = max(best, hits)
    return best / len(labels)


def test_crossmodal_label_defeats_every_single_modality_stump():
    corpus = synth_generate(SynthConfig(segments=600, dims=(2, 2, 2), noise=0.0, carrier=0.0), 13)
    labels = [s.label for s in corpus.segments]
    majority = np.bincount(np.asarray(labels) + 1).max() / len(labels)
    for modality in MODALITY_ORDER:
        means = [s.features(modality).mean() for s in corpus.segments]
        assert _best_stump_accuracy(means, labels) <= majority + 0.1, modality
    products = [np.sign(s.features(Modality.TEXT).mean() * s.features(Modality.AUDIO).mean())
                for s in corpus.segments]
    assert products == labels


def test_unimodal_label_is_planted_sign():
    config = SynthConfig(segments=40, mode=SignalMode.UNIMODAL, planted=(Modality.AUDIO,),
                         dims=(2, 2, 2), noise=0.0, carrier=0.0)
    for segment in synth_generate(config, 2).segments:
        assert np.sign(segment.features(Modality.AUDIO).mean()) == segment.label


def test_modality_rates_differ(small_corpus):
    segment = small_corpus.segments[0]
    rows = [segment.sequences[m].rows for m in MODALITY_ORDER]
    assert rows[1] > rows[2] > rows[0]


def test_synth_config_validation():
    with pytest.raises(ValidationError):
        SynthConfig(segments=0).validate()
    with pytest.raises(ValidationError):
        SynthConfig(mode=SignalMode.CROSSMODAL, planted=(Modality.TEXT,)).validate()


def test_plant_word_audio_boundaries():
    prototypes, audio, boundaries = plant_word_audio(3, 4, [2, 3, 1], seed=0)
    assert prototypes.shape == (3, 4)
    assert audio.rows == 6
    assert boundaries[0][0] == 0.0 and boundaries[-1][1] == pytest.approx(0.06)
    assert all(a[1] == b[0] for a, b in zip(boundaries, boundaries[1:]))
