from typing import Dict

from rich import box
from rich.table import Table

from ..analysis.alignment import AlignmentHeatmap
from ..analysis.probe import ProbeReport
from ..harness.records import METRIC_COLUMNS, RunRecord


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def metrics_table(record: RunRecord, title: str = "") -> Table:
    """One row per epoch of a run record."""
    table = Table(title=title or f"{record.config.kind.value} / {record.config.pipeline.value}", box=box.SIMPLE_HEAVY)
    for column in METRIC_COLUMNS:
        table.add_column(column, justify="left" if column in ("phase", "task") else "right")
    for row in record.epochs:
        table.add_row(*(_cell(row[c]) for c in METRIC_COLUMNS))
    return table


def summary_table(summary: Dict, title: str = "Summary") -> Table:
    table = Table(title=title, box=box.SIMPLE, show_header=False)
    table.add_column("key", style="cyan")
    table.add_column("value")
    for key, value in summary.items():
        if isinstance(value, (list, dict)):
            continue
        table.add_row(key, _cell(value))
    return table


def heatmap_table(heatmap: AlignmentHeatmap) -> Table:
    best = heatmap.argmax_cell
    table = Table(title=f"Mutual-KNN alignment (k={heatmap.k}, {heatmap.metric})", box=box.MINIMAL)
    table.add_column("LM \\ vision")
    for j in range(heatmap.scores.shape[1]):
        table.add_column(str(j), justify="right")
    for i, row in enumerate(heatmap.scores):
        cells = [f"[bold red]{v:.3f}[/bold red]" if (i, j) == best else f"{v:.3f}" for j, v in enumerate(row)]
        table.add_row(str(i), *cells)
    return table


def probe_table(name: str, report: ProbeReport) -> Table:
    table = Table(title=f"Linear probe: {name}", box=box.SIMPLE)
    table.add_column("target")
    table.add_column("layer", justify="right")
    table.add_column("initial", justify="right")
    table.add_column("final", justify="right")
    for entry in report.entries:
        table.add_row(entry.target_label, _cell(entry.layer), _cell(entry.losses[0]), _cell(entry.final_loss))
    return table


def bench_table(report: Dict, key: str, title: str) -> Table:
    table = Table(title=title, box=box.SIMPLE)
    table.add_column("pipeline")
    table.add_column("median seconds", justify="right")
    table.add_column("encoder calls", justify="right")
    for variant, timing in report["timings"].items():
        calls = timing.get("encoder_calls_per_epoch") or timing.get("encoder_calls_per_pass")
        table.add_row(variant, _cell(timing[key]), ", ".join(str(c) for c in calls))
    table.caption = f"ratio {report['variants'][1]} / {report['variants'][0]} = {report['ratio']:.3f}"
    return table
