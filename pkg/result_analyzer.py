"""
評価結果分析・表示ツール
MetricsReportと実行マニフェストを読み込み、モデル変種の比較表を作る
"""

import json
import os
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from errors import ValidationError, file_error
from training import MetricsReport

MULTIMODAL_LABEL = "TVA"
UNIMODAL_LABELS = ("T", "A", "V")
MANIFEST_SUFFIX = ".manifest.json"


@dataclass
class Improvement:
    """3モダリティ版と最良の単一モダリティ版の差"""
    metric: str
    multimodal: str
    best_unimodal: str
    value: float
    baseline: float

    @property
    def points(self) -> float:
        return (self.value - self.baseline) * 100.0

    @property
    def relative(self) -> Optional[float]:
        if self.baseline == 0:
            return None
        return (self.value - self.baseline) / self.baseline * 100.0

    def describe(self) -> str:
        relative = "n/a relative" if self.relative is None else f"{self.relative:+.1f}% relative"
        return (f"{self.multimodal} vs best unimodal {self.best_unimodal} {self.metric}: "
                f"{self.points:+.1f} points ({relative})")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metric": self.metric,
            "multimodal": self.multimodal,
            "best_unimodal": self.best_unimodal,
            "absolute_points": round(self.points, 6),
            "relative_percent": None if self.relative is None else round(self.relative, 6),
        }


def split_label(label: str) -> tuple:
    """'TVA-Mult' -> ('TVA', 'Mult')、接尾辞がなければ ('TVA', '')"""
    modalities, _, architecture = label.partition("-")
    return modalities, architecture


class ResultAnalyzer:
    """結果分析クラス"""

    def __init__(self, run_dir: Union[str, Path] = "pipeline_runs"):
        self.run_dir = Path(run_dir)

    def list_available_runs(self) -> List[Dict[str, str]]:
        """実行ディレクトリ内のマニフェスト一覧"""
        if not self.run_dir.exists():
            return []
        runs = []
        for path in sorted(self.run_dir.glob(f"*{MANIFEST_SUFFIX}")):
            stat = os.stat(path)
            runs.append({
                "file_name": path.name,
                "artifact": path.name[:-len(MANIFEST_SUFFIX)],
                "created_time": datetime.fromtimestamp(stat.st_mtime).strftime("%Y-%m-%d %H:%M"),
                "file_size": f"{stat.st_size / 1024:.1f} KB",
            })
        return runs

    def load_manifest(self, path: Union[str, Path]) -> Dict[str, Any]:
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: JSONとして読めません (行 {e.lineno}, 列 {e.colno})") from e
        except OSError as e:
            raise file_error(path, e) from e

    def load_report(self, path: Union[str, Path]) -> MetricsReport:
        try:
            with open(path, "r", encoding="utf-8") as f:
                return MetricsReport.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: JSONとして読めません (行 {e.lineno}, 列 {e.colno})") from e
        except OSError as e:
            raise file_error(path, e) from e

    def load_reports(self, paths: Sequence[Union[str, Path]]) -> List[MetricsReport]:
        return [self.load_report(p) for p in paths]

    # --- 比較 ---------------------------------------------------------------
    def to_frame(self, reports: Sequence[MetricsReport]) -> pd.DataFrame:
        """1行1モデルの比較表（モデル名の重複はエラー）"""
        if not reports:
            raise ValidationError("比較するレポートがありません")
        labels = [r.model for r in reports]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            raise ValidationError(f"モデル名が重複しています: {', '.join(duplicates)}")
        rows = []
        for report in reports:
            modalities, architecture = split_label(report.model)
            rows.append({
                "model": report.model,
                "modalities": modalities,
                "architecture": architecture,
                "Accuracy": report.accuracy,
                "F1": report.f1,
                "MAE": report.mae,
                "n": report.n,
            })
        return pd.DataFrame(rows)

    def improvements(self, reports: Sequence[MetricsReport]) -> List[Improvement]:
        """アーキテクチャごとに TVA - 最良単一モダリティ を計算（Accuracy と F1）"""
        frame = self.to_frame(reports)
        found = []
        for architecture, group in frame.groupby("architecture", sort=False):
            multimodal = group[group["modalities"] == MULTIMODAL_LABEL]
            unimodal = group[group["modalities"].isin(UNIMODAL_LABELS)]
            if multimodal.empty or unimodal.empty:
                continue
            top = multimodal.iloc[0]
            for metric in ("Accuracy", "F1"):
                best = unimodal.loc[unimodal[metric].idxmax()]
                found.append(Improvement(metric, top["model"], best["model"], float(top[metric]), float(best[metric])))
        return found

    def render_table(self, reports: Sequence[MetricsReport]) -> str:
        """固定幅のテキスト表（F1はマクロ平均）と差分のフッター"""
        self.to_frame(reports)
        lines = [MetricsReport.table_header()]
        lines.extend(r.table_row() for r in reports)
        lines.append("(F1 = macro average over classes present in the gold labels)")
        lines.extend(i.describe() for i in self.improvements(reports))
        return "\n".join(lines) + "\n"

    def comparison_document(self, reports: Sequence[MetricsReport]) -> Dict[str, Any]:
        frame = self.to_frame(reports)
        return {
            "rows": frame[["model", "Accuracy", "F1", "MAE", "n"]].to_dict(orient="records"),
            "f1_average": "macro",
            "improvements": [i.to_dict() for i in self.improvements(reports)],
        }

    def display_analysis(self, reports: Sequence[MetricsReport]) -> None:
        """比較結果をコンソール表示"""
        print("\n📊 === モデル比較レポート ===\n")
        print(self.render_table(reports), end="")
        for improvement in self.improvements(reports):
            mark = "✅" if improvement.points > 0 else "❌"
            print(f"  {mark} {improvement.multimodal} の {improvement.metric} 改善: {improvement.points:+.1f} points")
