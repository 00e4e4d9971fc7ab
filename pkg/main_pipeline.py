"""
マルチモーダル感情分析パイプライン
合成 -> 整列 -> 学習 -> 評価 -> 比較レポート をサブコマンドで実行する
"""

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from alignment import CollapseFn, align_corpus, is_aligned, unaligned_segments
from errors import PipelineError, UsageError, ValidationError, file_error
from fusion import FusionMode, ModelKind, load_checkpoint, save_checkpoint
from html_viewer import HTMLViewer
from model_factory import ModelFactory
from result_analyzer import ResultAnalyzer
from sequences import (
    SignalMode, Split, SynthConfig, apply_annotations, corpus_stats, fleiss_kappa,
    load_annotations, load_corpus, parse_modalities, save_corpus, synth_generate,
)
from training import MetricsReport, TrainConfig, evaluate, train

DEFAULT_SEED = 7
DEFAULT_RUN_DIR = "pipeline_runs"
# 卓上規模のデモ設定（テキスト・音声・映像の特徴次元）
DEMO_DIMS = (16, 12, 10)
MANIFEST_SUFFIX = ".manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(path, document: Dict[str, Any]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, ensure_ascii=False, indent=2)
            f.write("\n")
    except OSError as e:
        raise file_error(path, e) from e


@dataclass
class RunManifest:
    """1コマンドの実行記録（再実行に必要な設定と成果物のハッシュ）"""
    command: str
    config: Dict[str, Any]
    seed: Optional[int]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    hashes: Dict[str, str] = field(default_factory=dict)
    results: Dict[str, Any] = field(default_factory=dict)
    started_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    _clock: float = field(default_factory=time.perf_counter, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "hashes": self.hashes,
            "results": self.results,
            "timings": {
                "started_at": self.started_at,
                "elapsed_s": round(time.perf_counter() - self._clock, 3),
            },
        }

    def write(self, artifact) -> str:
        """成果物のハッシュを記録して <artifact>.manifest.json に保存"""
        for path in list(self.inputs.values()) + list(self.outputs.values()):
            if Path(path).is_file():
                self.hashes[str(path)] = sha256_file(path)
        manifest_path = f"{artifact}{MANIFEST_SUFFIX}"
        write_json(manifest_path, self.to_dict())
        return manifest_path


class PipelineArgumentParser(argparse.ArgumentParser):
    """引数エラーを UsageError として送出する"""

    def error(self, message):
        raise UsageError(message)


def default_seed() -> int:
    value = os.environ.get("SENTIMENT_SEED", str(DEFAULT_SEED))
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"SENTIMENT_SEED は整数が必要です ({value!r})") from None


def parse_dims(text: str) -> tuple:
    try:
        dims = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise UsageError(f"--dims は '16,12,10' 形式が必要です ({text!r})") from None
    if len(dims) != 3 or min(dims) < 1:
        raise UsageError(f"--dims は正の整数3つが必要です ({text!r})")
    return dims


def _modality_mask(text: str):
    try:
        return parse_modalities(text)
    except ValidationError as e:
        raise UsageError(str(e)) from None


def _require_aligned(corpus, path) -> None:
    if not is_aligned(corpus):
        first = unaligned_segments(corpus)[0]
        raise ValidationError(f"{path}: セグメント {first} が未整列です。先に 'align' を実行してください")


# ---------------------------------------------------------------------------
# サブコマンド
# ---------------------------------------------------------------------------

def synth_config_from_args(args) -> SynthConfig:
    if args.segments < 1:
        raise UsageError(f"--segments は1以上が必要です ({args.segments})")
    planted = tuple(m.value for m in _modality_mask(args.planted)) if args.planted else ()
    return SynthConfig(
        segments=args.segments,
        mode=SignalMode(args.mode),
        dims=parse_dims(args.dims),
        planted=planted,
        amplitude=args.amplitude,
        noise=args.noise,
        neutral_rate=args.neutral_rate,
    )


def cmd_synth(args) -> int:
    config = synth_config_from_args(args)
    manifest = RunManifest("synth", config.to_dict(), args.seed, outputs={"corpus": args.out})
    print(f"🚀 合成コーパス生成: {config.segments} セグメント ({config.mode.value}, seed={args.seed})")
    corpus = synth_generate(config, args.seed)
    save_corpus(corpus, args.out)
    manifest.write(args.out)
    print(f"✅ 保存しました: {args.out}")
    return 0


def cmd_align(args) -> int:
    collapse = CollapseFn(args.collapse)
    manifest = RunManifest("align", {"collapse": collapse.value, "pivot": "text"}, None,
                           inputs={"corpus": args.input}, outputs={"corpus": args.out})
    print(f"📂 読み込み: {args.input}")
    corpus = align_corpus(load_corpus(args.input), collapse)
    save_corpus(corpus, args.out)
    manifest.write(args.out)
    print(f"✅ 整列済みコーパスを保存しました: {args.out} ({len(corpus.segments)} セグメント)")
    return 0


def _architecture_overrides(args) -> Dict[ModelKind, Dict[str, Any]]:
    mult, lstm = {}, {}
    if args.d_k is not None:
        mult["d_k"] = args.d_k
    if args.layers is not None:
        mult["layers"] = args.layers
    if args.residual:
        mult["residual"] = True
    if args.hidden is not None:
        lstm["hidden"] = args.hidden
    if args.head_hidden is not None:
        mult["head_hidden"] = lstm["head_hidden"] = args.head_hidden
    return {ModelKind.MULT: mult, ModelKind.LF_LSTM: lstm}


def cmd_train(args) -> int:
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        model=ModelKind(args.model),
        modalities=_modality_mask(args.modalities),
        fusion=FusionMode(args.fusion),
    ).validate()
    history_path = args.history or f"{args.out}.history.json"
    corpus = load_corpus(args.corpus)
    _require_aligned(corpus, args.corpus)

    factory = ModelFactory(_architecture_overrides(args))
    model = factory.build_from_train_config(config, corpus.dims_tuple())
    manifest = RunManifest("train", {"train": config.to_dict(), "model": model.config.to_dict()}, args.seed,
                           inputs={"corpus": args.corpus},
                           outputs={"checkpoint": args.out, "history": history_path})
    print(f"🚀 学習開始: {model.label} ({config.epochs} epochs, lr={config.learning_rate})")
    trained, history = train(model, corpus, config, verbose=args.verbose)
    save_checkpoint(trained, args.out)
    write_json(history_path, {"model": trained.label, "loss": history})
    manifest.results["final_train_loss"] = history[-1]
    manifest.write(args.out)
    print(f"✅ チェックポイントを保存しました: {args.out} (最終損失 {history[-1]:.4f})")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    _require_aligned(corpus, args.corpus)
    report = evaluate(model, corpus, args.split)
    write_json(args.out, report.to_dict())
    manifest = RunManifest("eval", {"split": args.split}, None,
                           inputs={"checkpoint": args.checkpoint, "corpus": args.corpus},
                           outputs={"report": args.out})
    manifest.results = report.to_dict()
    manifest.write(args.out)
    print(json.dumps(report.to_dict(), ensure_ascii=False))
    print(MetricsReport.table_header())
    print(report.table_row())
    return 0


def cmd_report(args) -> int:
    analyzer = ResultAnalyzer()
    reports = analyzer.load_reports(args.reports)
    table = analyzer.render_table(reports)
    print(table, end="")
    outputs = {}
    if args.out:
        write_json(args.out, analyzer.comparison_document(reports))
        outputs["comparison"] = args.out
    if args.html:
        outputs["html"] = HTMLViewer(analyzer).generate_comparison_report(reports, args.html)
        print(f"📊 HTMLレポートを生成しました: {outputs['html']}")
    if args.out:
        RunManifest("report", {"reports": list(args.reports)}, None,
                    inputs={f"report{k}": p for k, p in enumerate(args.reports)},
                    outputs=outputs).write(args.out)
    return 0


def cmd_stats(args) -> int:
    stats = corpus_stats(load_corpus(args.corpus))
    document = stats.to_dict()
    print(f"📊 コーパス統計: {args.corpus}")
    print(f"  セグメント数: {stats.total_segments} (主観 {stats.subjective_segments})")
    print(f"  Positive / Negative / Neutral: {stats.positive} / {stats.negative} / {stats.neutral}")
    if stats.average_duration_s is not None:
        print(f"  平均長: {stats.average_duration_s:.2f}s  総時間: {document['total_duration']}")
    print(f"  次元: {document['dims']}  分割: {document['split_counts']}")
    if args.out:
        write_json(args.out, document)
    return 0


def cmd_aggregate(args) -> int:
    corpus = load_corpus(args.corpus)
    annotations = load_annotations(args.annotations)
    relabelled, agreement = apply_annotations(corpus, annotations)
    kappa = fleiss_kappa(annotations)
    save_corpus(relabelled, args.out)
    manifest = RunManifest("aggregate", {"annotators_per_segment": 5}, None,
                           inputs={"corpus": args.corpus, "annotations": args.annotations},
                           outputs={"corpus": args.out})
    manifest.results = {"fleiss_kappa": kappa, "agreement": agreement}
    manifest.write(args.out)
    print(f"✅ {len(annotations)} セグメントを再ラベルしました (Fleiss' kappa = {kappa:.3f})")
    return 0


def cmd_experiment(args) -> int:
    """合成から比較レポートまでを全変種について実行"""
    run_dir = Path(args.run_dir or os.environ.get("SENTIMENT_RUN_DIR", DEFAULT_RUN_DIR))
    run_dir.mkdir(parents=True, exist_ok=True)
    config = synth_config_from_args(args)
    corpus_path, aligned_path = run_dir / "corpus.json", run_dir / "aligned.json"

    print(f"🚀 実験開始: {config.segments} セグメント, seed={args.seed}, 出力先 {run_dir}")
    corpus = synth_generate(config, args.seed)
    save_corpus(corpus, corpus_path)
    RunManifest("synth", config.to_dict(), args.seed, outputs={"corpus": str(corpus_path)}).write(corpus_path)
    aligned = align_corpus(corpus, CollapseFn(args.collapse))
    save_corpus(aligned, aligned_path)
    RunManifest("align", {"collapse": args.collapse, "pivot": "text"}, None,
                inputs={"corpus": str(corpus_path)}, outputs={"corpus": str(aligned_path)}).write(aligned_path)

    factory = ModelFactory(_architecture_overrides(args))
    kinds = [ModelKind(k) for k in args.models]
    reports: List[MetricsReport] = []
    for profile in factory.experiment_profiles(kinds):
        train_config = factory.train_config(profile, epochs=args.epochs, batch_size=args.batch_size,
                                            learning_rate=args.lr, seed=args.seed,
                                            fusion=FusionMode(args.fusion)).validate()
        model = factory.build(profile, aligned.dims_tuple(), args.seed, train_config.fusion)
        print(f"📂 {profile.name}: {profile.description}")
        trained, history = train(model, aligned, train_config, verbose=args.verbose)
        checkpoint = run_dir / f"{profile.name}.checkpoint.json"
        save_checkpoint(trained, checkpoint)
        report = evaluate(trained, aligned, Split.TEST)
        report_path = run_dir / f"{profile.name}.report.json"
        write_json(report_path, report.to_dict())
        manifest = RunManifest("train", {"train": train_config.to_dict(), "model": trained.config.to_dict()},
                               args.seed, inputs={"corpus": str(aligned_path)},
                               outputs={"checkpoint": str(checkpoint), "report": str(report_path)})
        manifest.results = {"final_train_loss": history[-1], "test": report.to_dict()}
        manifest.write(checkpoint)
        print(f"  ✅ acc={report.accuracy:.3f} f1={report.f1:.3f} mae={report.mae:.3f}")
        reports.append(report)

    analyzer = ResultAnalyzer(run_dir)
    table = analyzer.render_table(reports)
    (run_dir / "comparison.txt").write_text(table, encoding="utf-8")
    write_json(run_dir / "comparison.json", analyzer.comparison_document(reports))
    HTMLViewer(analyzer).generate_comparison_report(reports, run_dir / "comparison.html")
    analyzer.display_analysis(reports)
    return 0


# ---------------------------------------------------------------------------
# 引数
# ---------------------------------------------------------------------------

def _add_synth_flags(parser: argparse.ArgumentParser, seed: int) -> None:
    parser.add_argument("--mode", choices=[m.value for m in SignalMode], default=SignalMode.CROSSMODAL.value)
    parser.add_argument("--segments", type=int, default=300)
    parser.add_argument("--dims", default=",".join(str(d) for d in DEMO_DIMS), help="text,audio,video の特徴次元")
    parser.add_argument("--planted", default="", help="信号を埋め込むモダリティ (例: ta)")
    parser.add_argument("--amplitude", type=float, default=1.0)
    parser.add_argument("--noise", type=float, default=0.5)
    parser.add_argument("--neutral-rate", type=float, default=0.2)
    parser.add_argument("--seed", type=int, default=seed)


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--lr", type=float, default=0.1)
    parser.add_argument("--fusion", choices=[f.value for f in FusionMode], default=FusionMode.CONCAT.value)
    parser.add_argument("--d-k", type=int, default=None)
    parser.add_argument("--layers", type=int, default=None)
    parser.add_argument("--residual", action="store_true")
    parser.add_argument("--hidden", type=int, default=None)
    parser.add_argument("--head-hidden", type=int, default=None)
    parser.add_argument("--verbose", action="store_true", help="エポックごとの損失を表示")


def build_parser() -> argparse.ArgumentParser:
    seed = default_seed()
    parser = PipelineArgumentParser(description="マルチモーダル感情分析パイプライン")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="合成コーパスを生成")
    _add_synth_flags(synth, seed)
    synth.add_argument("--out", required=True)
    synth.set_defaults(handler=cmd_synth)

    align = commands.add_parser("align", help="テキスト時間軸に整列")
    align.add_argument("--in", dest="input", required=True)
    align.add_argument("--out", required=True)
    align.add_argument("--collapse", choices=[c.value for c in CollapseFn], default=CollapseFn.MEAN.value)
    align.set_defaults(handler=cmd_align)

    train_cmd = commands.add_parser("train", help="モデルを学習")
    train_cmd.add_argument("--corpus", required=True)
    train_cmd.add_argument("--model", choices=[k.value for k in ModelKind], default=ModelKind.MULT.value)
    train_cmd.add_argument("--modalities", default="tva")
    train_cmd.add_argument("--out", required=True)
    train_cmd.add_argument("--history", default=None)
    train_cmd.add_argument("--seed", type=int, default=seed)
    _add_training_flags(train_cmd)
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = commands.add_parser("eval", help="チェックポイントを評価")
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--corpus", required=True)
    eval_cmd.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)
    eval_cmd.add_argument("--out", required=True)
    eval_cmd.set_defaults(handler=cmd_eval)

    report = commands.add_parser("report", help="評価結果の比較表")
    report.add_argument("reports", nargs="+")
    report.add_argument("--out", default=None)
    report.add_argument("--html", default=None)
    report.set_defaults(handler=cmd_report)

    stats = commands.add_parser("stats", help="コーパス統計を表示")
    stats.add_argument("--corpus", required=True)
    stats.add_argument("--out", default=None)
    stats.set_defaults(handler=cmd_stats)

    aggregate = commands.add_parser("aggregate", help="アノテーションを集約して再ラベル")
    aggregate.add_argument("--corpus", required=True)
    aggregate.add_argument("--annotations", required=True)
    aggregate.add_argument("--out", required=True)
    aggregate.set_defaults(handler=cmd_aggregate)

    experiment = commands.add_parser("experiment", help="全変種の比較実験")
    _add_synth_flags(experiment, seed)
    _add_training_flags(experiment)
    experiment.add_argument("--collapse", choices=[c.value for c in CollapseFn], default=CollapseFn.MEAN.value)
    experiment.add_argument("--models", nargs="+", choices=[k.value for k in ModelKind],
                            default=[k.value for k in ModelKind])
    experiment.add_argument("--run-dir", default=None)
    experiment.set_defaults(handler=cmd_experiment)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン実行関数（戻り値は終了コード）"""
    load_dotenv()

    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except OSError as e:
        error = file_error(e.filename or "", e)
    except PipelineError as e:
        error = e
    print(f"❌ {error}", file=sys.stdout)
    print(error.cli_line(), file=sys.stderr)
    return error.code.value


if __name__ == "__main__":
    sys.exit(main())
