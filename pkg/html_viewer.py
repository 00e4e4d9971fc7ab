"""
HTMLビューアー - モデル比較結果の可視化
Accuracy / F1 / MAE をモデル変種ごとの棒グラフと表でHTMLに出力
"""

import html
from pathlib import Path
from typing import Sequence, Union

import plotly.graph_objects as go

from result_analyzer import ResultAnalyzer
from training import MetricsReport

METRIC_COLORS = {"Accuracy": "lightblue", "F1": "lightcoral", "MAE": "lightgreen"}


class HTMLViewer:
    """HTML結果ビューアー"""

    def __init__(self, analyzer: ResultAnalyzer = None):
        self.analyzer = analyzer or ResultAnalyzer()

    def build_figure(self, reports: Sequence[MetricsReport]) -> go.Figure:
        """モデルごとのグループ棒グラフ"""
        frame = self.analyzer.to_frame(reports)
        fig = go.Figure()
        for metric, color in METRIC_COLORS.items():
            fig.add_trace(go.Bar(
                name=metric,
                x=frame["model"].tolist(),
                y=frame[metric].tolist(),
                marker_color=color,
            ))
        fig.update_layout(
            title="モデル変種の性能比較",
            xaxis_title="モデル",
            yaxis_title="スコア",
            barmode="group",
            height=450,
        )
        return fig

    def generate_comparison_report(self, reports: Sequence[MetricsReport], output_file: Union[str, Path]) -> str:
        """比較レポートをHTMLファイルに書き出してパスを返す"""
        output_file = Path(output_file)
        output_file.parent.mkdir(parents=True, exist_ok=True)
        output_file.write_text(self._generate_html_content(reports), encoding="utf-8")
        return str(output_file)

    def _generate_html_content(self, reports: Sequence[MetricsReport]) -> str:
        frame = self.analyzer.to_frame(reports)
        table = frame[["model", "Accuracy", "F1", "MAE", "n"]].to_html(
            index=False, float_format=lambda v: f"{v:.4f}", classes="metrics")
        footer = "".join(f"<li>{html.escape(i.describe())}</li>" for i in self.analyzer.improvements(reports))
        chart = self.build_figure(reports).to_html(full_html=False, include_plotlyjs="cdn")
        return f"""<!DOCTYPE html>
<html lang="ja">
<head>
    <meta charset="UTF-8">
    <title>モデル比較レポート</title>
    <style>
        {self._get_css_styles()}
    </style>
</head>
<body>
    <div class="container">
        <div class="header"><h1>📊 モデル比較レポート</h1></div>
        <div class="section">{chart}</div>
        <div class="section">
            <h2>評価指標（F1はマクロ平均）</h2>
            {table}
            <ul class="improvements">{footer}</ul>
        </div>
    </div>
</body>
</html>
"""

    def _get_css_styles(self) -> str:
        return """
        body { font-family: 'Segoe UI', Tahoma, sans-serif; color: #333; background: #f4f6f8; }
        .container { max-width: 1100px; margin: 20px auto; background: white; border-radius: 15px; }
        .header { background: linear-gradient(135deg, #2c3e50 0%, #3498db 100%); color: white; padding: 30px; }
        .section { padding: 30px; border-bottom: 1px solid #eee; }
        .section h2 { color: #2c3e50; border-left: 5px solid #3498db; padding-left: 15px; }
        table.metrics { border-collapse: collapse; font-family: monospace; }
        table.metrics td, table.metrics th { padding: 6px 14px; border: 1px solid #ddd; text-align: right; }
        """
