"""
Trend report over finished runs: Markdown, HTML and PDF renderings of the
measured comparisons, each with the config hash it came from.
"""

import datetime
import json
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import markdown
from reportlab.lib.colors import HexColor
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from ..errors import FormatError

logger = logging.getLogger(__name__)

RUN_COLUMNS = ["run", "kind", "pipeline", "config", "initial loss", "final loss", "best BLEU-4", "best accuracy"]


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def collect_runs(run_dirs: Sequence[Union[str, Path]]) -> List[Dict]:
    """summary.json of every run directory, plus any probe reports and heatmaps inside it."""
    runs = []
    for directory in run_dirs:
        root = Path(directory)
        summary_path = root / "summary.json"
        if not summary_path.exists():
            raise FormatError(f"{root} has no summary.json")
        with open(summary_path) as f:
            run = {"name": root.name, "summary": json.load(f), "probes": {}, "heatmap": None}
        for probe_path in sorted(root.glob("probe_report*.json")):
            with open(probe_path) as f:
                run["probes"][probe_path.stem] = json.load(f)
        if (root / "heatmap.json").exists():
            with open(root / "heatmap.json") as f:
                run["heatmap"] = json.load(f)
        runs.append(run)
    return runs


def _pairs(runs: List[Dict]) -> List[Tuple[Dict, Dict]]:
    """(standard, grounded) runs of the same experiment kind."""
    by_kind: Dict[str, Dict[str, Dict]] = {}
    for run in runs:
        summary = run["summary"]
        if "kind" in summary and "pipeline" in summary:
            by_kind.setdefault(summary["kind"], {})[summary["pipeline"]] = run
    return [(sides["standard"], sides["grounded"]) for sides in by_kind.values() if {"standard", "grounded"} <= sides.keys()]


def build_markdown(runs: List[Dict], title: str = "Fusion trend report") -> str:
    lines = [f"# {title}", "", f"Generated: {datetime.datetime.now().strftime('%Y-%m-%d %H:%M:%S')}", ""]
    lines += ["## Runs", "", "| " + " | ".join(RUN_COLUMNS) + " |", "|" + "---|" * len(RUN_COLUMNS)]
    for run in runs:
        s = run["summary"]
        cells = [
            run["name"], s.get("kind"), s.get("pipeline"), (s.get("config_hash") or "")[:12],
            s.get("initial_train_loss"), s.get("final_train_loss"), s.get("best_val_bleu4"), s.get("best_val_accuracy"),
        ]
        lines.append("| " + " | ".join(_fmt(c) for c in cells) + " |")
    lines.append("")

    pairs = _pairs(runs)
    if pairs:
        lines += ["## Measured comparisons", ""]
        for standard, grounded in pairs:
            s, g = standard["summary"], grounded["summary"]
            lines.append(f"### {s['kind']}")
            for key, label in (("best_val_bleu4", "best BLEU-4"), ("best_val_accuracy", "best accuracy"), ("final_train_loss", "final train loss")):
                if s.get(key) is not None and g.get(key) is not None:
                    lines.append(
                        f"- {label}: standard {_fmt(s[key])} ({s['config_hash'][:12]}), "
                        f"grounded {_fmt(g[key])} ({g['config_hash'][:12]}), difference {g[key] - s[key]:+.4f}"
                    )
            lines.append("")

    for run in runs:
        for name, probe in run["probes"].items():
            lines += [f"## Probe: {run['name']} / {name}", ""]
            for target in probe.get("targets", []):
                lines.append(f"- {target['target']}: final loss {_fmt(target['final_loss'])}")
            lines.append("")
        if run["heatmap"]:
            h = run["heatmap"]
            lines += [
                f"## Alignment: {run['name']}",
                "",
                f"- k = {h['k']} ({h.get('metric', 'cosine')}), max score {_fmt(h.get('max_score'))} at LM layer {h['argmax'][0]}, vision layer {h['argmax'][1]}",
                "",
            ]
    return "\n".join(lines)


class TrendReportPDFGenerator:
    """Renders a trend report's Markdown into a PDF."""

    def __init__(self, title: str = "Fusion trend report"):
        self.title = title
        self.styles = self._create_styles()

    def _create_styles(self):
        styles = getSampleStyleSheet()
        styles.add(ParagraphStyle(name="LabTitle", parent=styles["Title"], fontSize=22, textColor=HexColor("#1f4e79"), spaceAfter=24, alignment=1))
        styles.add(ParagraphStyle(name="LabHeading2", parent=styles["Heading2"], fontSize=15, textColor=HexColor("#2e5c8a"), spaceBefore=14, spaceAfter=8))
        styles.add(ParagraphStyle(name="LabHeading3", parent=styles["Heading3"], fontSize=12, textColor=HexColor("#4472a8"), spaceBefore=10, spaceAfter=6))
        styles.add(ParagraphStyle(name="LabBody", parent=styles["Normal"], fontSize=9, leading=12, textColor=HexColor("#333333"), spaceAfter=4))
        return styles

    @staticmethod
    def _escape(text: str) -> str:
        return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")

    def _flowables(self, markdown_text: str) -> list:
        story, table_rows = [], []

        def flush_table():
            if table_rows:
                table = Table(table_rows, repeatRows=1)
                table.setStyle(TableStyle([
                    ("FONTSIZE", (0, 0), (-1, -1), 7),
                    ("BACKGROUND", (0, 0), (-1, 0), HexColor("#dce6f2")),
                    ("GRID", (0, 0), (-1, -1), 0.25, HexColor("#999999")),
                ]))
                story.extend([table, Spacer(1, 10)])
                table_rows.clear()

        for line in markdown_text.splitlines():
            line = line.strip()
            if line.startswith("|"):
                if not re.fullmatch(r"\|(-+\|)+", line):
                    table_rows.append([cell.strip() for cell in line.strip("|").split("|")])
                continue
            flush_table()
            if not line or line.startswith("# "):
                continue
            if line.startswith("## "):
                story.append(Paragraph(self._escape(line[3:]), self.styles["LabHeading2"]))
            elif line.startswith("### "):
                story.append(Paragraph(self._escape(line[4:]), self.styles["LabHeading3"]))
            else:
                content = self._escape(line[2:] if line.startswith("- ") else line)
                story.append(Paragraph(("&bull; " if line.startswith("- ") else "") + content, self.styles["LabBody"]))
        flush_table()
        return story

    def generate_pdf_report(self, markdown_text: str, filepath: Union[str, Path]) -> Path:
        filepath = Path(filepath)
        doc = SimpleDocTemplate(str(filepath), pagesize=A4, rightMargin=48, leftMargin=48, topMargin=60, bottomMargin=24)
        story = [Paragraph(self._escape(self.title), self.styles["LabTitle"])]
        story.extend(self._flowables(markdown_text))
        doc.build(story)
        return filepath


def write_trend_report(run_dirs: Sequence[Union[str, Path]], out: Union[str, Path], title: Optional[str] = None) -> Tuple[Path, Path]:
    """
    Write trend_report.md, trend_report.html and trend_report.pdf into `out`.

    Returns:
        tuple: (markdown path, pdf path)
    """
    title = title or "Fusion trend report"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    text = build_markdown(collect_runs(run_dirs), title)
    md_path = out / "trend_report.md"
    md_path.write_text(text, encoding="utf-8")
    (out / "trend_report.html").write_text(markdown.markdown(text, extensions=["tables"]), encoding="utf-8")
    pdf_path = TrendReportPDFGenerator(title).generate_pdf_report(text, out / "trend_report.pdf")
    logger.info("Trend report written to %s and %s", md_path, pdf_path)
    return md_path, pdf_path
