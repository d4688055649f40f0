"""Figure rendering writes valid PNG files."""

import numpy as np

from dmtl import plots
from dmtl.metrics import ComparisonRow, ComparisonTable, MetricRow, MetricsReport

PNG_MAGIC = b"\x89PNG"


def test_loss_curve(tmp_path):
    path = tmp_path / "loss.png"
    plots.save_loss_curve([10.0, 5.0, 2.0, 1.0], path)
    assert path.read_bytes()[:4] == PNG_MAGIC


def test_cooccurrence_heatmap(tmp_path):
    path = tmp_path / "cooc.png"
    m = np.array([[1.0, -0.5], [-0.5, 1.0]])
    plots.save_cooccurrence_heatmap(m, ["a", "b"], path)
    assert path.read_bytes()[:4] == PNG_MAGIC


def test_metrics_bars(tmp_path):
    report = MetricsReport([
        MetricRow("flag", "N", "accuracy", 0.9),
        MetricRow("level", "O", "mae", 0.12),
        MetricRow("ALL", "aggregate", "mean_accuracy", 0.9),
    ])
    path = tmp_path / "metrics.png"
    plots.save_metrics_bars(report, path)
    assert path.read_bytes()[:4] == PNG_MAGIC


def test_comparison_bars(tmp_path):
    table = ComparisonTable(
        seeds=[0, 1],
        rows=[ComparisonRow("a0", [0.8, 0.82], [0.7, 0.71]),
              ComparisonRow("MEAN", [0.8, 0.82], [0.7, 0.71])],
        budget_ratio=1.0)
    path = tmp_path / "cmp.png"
    plots.save_comparison_bars(table, path)
    assert path.read_bytes()[:4] == PNG_MAGIC
