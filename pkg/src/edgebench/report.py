"""Report serialization: one JSON document and one CSV summary row per target."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from .metrics import EvaluationReport

CSV_COLUMNS = (
    "target_id",
    "precision_label",
    "mean_infer_ms",
    "mean_total_ms",
    "fps",
    "absolute_w",
    "relative_w",
    "efficiency_fps_per_w",
    "map_50_95",
)


def _finite(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def report_to_dict(report: EvaluationReport) -> dict:
    return {
        "target_id": report.target_id,
        "precision_label": report.precision_label,
        "run_count": report.run_count,
        "accuracy": {
            "map_50_95": report.map_50_95,
            "per_iou_map": report.per_iou_map,
        },
        "timing": {
            "mean_pre_ms": report.mean_pre_ms,
            "mean_infer_ms": report.mean_infer_ms,
            "mean_post_ms": report.mean_post_ms,
            "mean_total_ms": report.mean_total_ms,
            "fps": _finite(report.fps),
            "records": [
                {
                    "run": r.run,
                    "frame_id": r.frame_id,
                    "pre_ms": r.pre_ms,
                    "infer_ms": r.infer_ms,
                    "post_ms": r.post_ms,
                    "total_ms": r.total_ms,
                }
                for r in report.timing_records
            ],
        },
        "power": {
            "absolute_w": report.absolute_power_w,
            "idle_w": report.idle_power_w,
            "relative_w": report.relative_power_w,
            "efficiency_fps_per_w": report.efficiency_fps_per_w,
            "clamped": report.power_clamped,
        },
        "session": {**report.session, "missing_frames": list(report.missing_frames)},
        "evaluators": report.fragments,
        "evaluator_errors": report.evaluator_errors,
    }


def summary_row(report: EvaluationReport) -> dict:
    return {
        "target_id": report.target_id,
        "precision_label": report.precision_label,
        "mean_infer_ms": report.mean_infer_ms,
        "mean_total_ms": report.mean_total_ms,
        "fps": _finite(report.fps),
        "absolute_w": report.absolute_power_w,
        "relative_w": report.relative_power_w,
        "efficiency_fps_per_w": report.efficiency_fps_per_w,
        "map_50_95": report.map_50_95,
    }


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_report(report: EvaluationReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report_to_dict(report), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if fmt == "csv":
        return render_summary([report])
    raise ValueError(f"unknown report format {fmt!r}")


def render_summary(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for report in reports:
        row = summary_row(report)
        w.writerow([_cell(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_report(report: EvaluationReport, path, fmt: str = "json") -> Path:
    """Serialize ``report`` deterministically to ``path``."""
    path = Path(path)
    text = render_report(report, fmt)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path
