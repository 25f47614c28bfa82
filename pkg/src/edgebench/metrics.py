"""Accuracy, latency, power and efficiency measures.

Accuracy follows the COCO conventions for the headline mAP@[.5:.95]:
101-point interpolated AP, at most 100 detections per frame, one area range,
and classes without ground truth left out of the class mean.
"""

from __future__ import annotations

import bisect
import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .vision import Box, Detection, GroundTruthBox, iou

log = logging.getLogger(__name__)

IOU_THRESHOLDS: tuple[float, ...] = tuple((50 + 5 * i) / 100 for i in range(10))
RECALL_POINTS = 101
MAX_DETECTIONS = 100


@dataclass
class ClassMatches:
    """TP/FP labels for one class, in matching (descending confidence) order."""

    labels: list[bool] = field(default_factory=list)
    confidences: list[float] = field(default_factory=list)
    frame_ids: list[int] = field(default_factory=list)
    gt_count: int = 0


def _cap(dets: Sequence[Detection], max_dets: int) -> list[tuple[int, Detection]]:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    return [(i, dets[i]) for i in order[:max_dets]]


def _gt_box(gt) -> tuple[Box, int]:
    if isinstance(gt, GroundTruthBox):
        return gt.box, gt.class_id
    box, cls = gt
    return box, int(cls)


class _Scene:
    """Detections and ground truth grouped by class, IoUs computed once."""

    def __init__(self, dets: Mapping[int, Sequence[Detection]], gts: Mapping[int, Sequence], max_dets: int):
        self.gt_counts: dict[int, int] = {}
        gt_by_key: dict[tuple[int, int], list[Box]] = {}
        for frame_id, frame_gts in gts.items():
            for gt in frame_gts:
                box, cls = _gt_box(gt)
                gt_by_key.setdefault((cls, frame_id), []).append(box)
                self.gt_counts[cls] = self.gt_counts.get(cls, 0) + 1

        ranked: dict[int, list[tuple[float, int, int, list[float]]]] = {}
        for frame_id, frame_dets in dets.items():
            for index, det in _cap(frame_dets, max_dets):
                boxes = gt_by_key.get((det.class_id, frame_id), [])
                ious = [iou(det.box, b) for b in boxes]
                ranked.setdefault(det.class_id, []).append((det.confidence, frame_id, index, ious))
        # descending confidence; ties by lower frame id, then lower index
        self.ranked = {c: sorted(v, key=lambda t: (-t[0], t[1], t[2])) for c, v in ranked.items()}

    def match(self, iou_thr: float) -> dict[int, ClassMatches]:
        out: dict[int, ClassMatches] = {}
        for cls in set(self.gt_counts) | set(self.ranked):
            result = ClassMatches(gt_count=self.gt_counts.get(cls, 0))
            taken: dict[int, set[int]] = {}
            for conf, frame_id, _, ious in self.ranked.get(cls, []):
                used = taken.setdefault(frame_id, set())
                best, best_iou = -1, -1.0
                for g, value in enumerate(ious):
                    if g in used or value < iou_thr:
                        continue
                    if value > best_iou:
                        best, best_iou = g, value
                if best >= 0:
                    used.add(best)
                result.labels.append(best >= 0)
                result.confidences.append(conf)
                result.frame_ids.append(frame_id)
            out[cls] = result
        return out


def match_detections(
    dets: Mapping[int, Sequence[Detection]],
    gts: Mapping[int, Sequence],
    iou_thr: float,
    max_dets: int = MAX_DETECTIONS,
) -> dict[int, ClassMatches]:
    """Greedily match detections to ground truth, class by class.

    Detections are visited in descending confidence. Each takes the unmatched
    same-class ground-truth box in its frame with the highest IoU, provided
    that IoU is at least ``iou_thr``. Equal IoUs go to the earlier box.

    Args:
        dets: frame_id -> detections for that frame.
        gts: frame_id -> ground-truth boxes (``GroundTruthBox`` or
            ``(Box, class_id)`` pairs).
        iou_thr: minimum IoU for a match.
        max_dets: per-frame cap applied to the most confident detections.

    Returns:
        class_id -> :class:`ClassMatches`.
    """
    return _Scene(dets, gts, max_dets).match(iou_thr)


def average_precision(labels: Sequence[bool], gt_count: int) -> float:
    """101-point interpolated average precision.

    ``labels`` are TP/FP flags in descending-confidence order.
    """
    if gt_count <= 0:
        raise ValueError("average precision is undefined without ground truth")
    if len(labels) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(labels, dtype=np.int64))
    precision = tp / np.arange(1, len(tp) + 1)
    # precision envelope: best precision at this rank or any later one
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100  <=>  100 * tp >= k * gt_count, compared in integers
    points = np.arange(RECALL_POINTS, dtype=np.int64) * gt_count
    idx = np.searchsorted(100 * tp, points, side="left")
    sampled = [float(envelope[i]) if i < len(envelope) else 0.0 for i in idx]
    return math.fsum(sampled) / RECALL_POINTS


def map_50_95(
    dets: Mapping[int, Sequence[Detection]],
    gts: Mapping[int, Sequence],
    max_dets: int = MAX_DETECTIONS,
) -> tuple[float, list[float]]:
    """COCO mAP averaged over IoU thresholds 0.50, 0.55, ..., 0.95.

    Returns:
        ``(map_50_95, per_threshold_map)`` with ten per-threshold values.
    """
    scene = _Scene(dets, gts, max_dets)
    classes = sorted(c for c, n in scene.gt_counts.items() if n > 0)
    if not classes:
        raise ValueError("mAP is undefined for an empty ground-truth set")
    per_iou = []
    for thr in IOU_THRESHOLDS:
        matches = scene.match(thr)
        aps = [average_precision(matches[c].labels, matches[c].gt_count) for c in classes]
        per_iou.append(math.fsum(aps) / len(aps))
    return math.fsum(per_iou) / len(per_iou), per_iou


@dataclass(frozen=True)
class TimingRecord:
    frame_id: int
    pre_ms: float
    infer_ms: float
    post_ms: float
    run: int = 1

    def __post_init__(self):
        for name in ("pre_ms", "infer_ms", "post_ms"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
            object.__setattr__(self, name, value)

    @property
    def total_ms(self) -> float:
        return self.pre_ms + self.infer_ms + self.post_ms


@dataclass(frozen=True)
class TimingSummary:
    mean_pre_ms: float
    mean_infer_ms: float
    mean_post_ms: float
    mean_total_ms: float
    fps: float
    count: int


def aggregate_timing(records: Iterable[TimingRecord]) -> TimingSummary:
    """Average stage latencies over every record of every run.

    ``fps`` is ``1000 / mean_total_ms``.
    """
    records = list(records)
    if not records:
        raise ValueError("no timing records to aggregate")
    runs: dict[int, set[int]] = {}
    for r in records:
        runs.setdefault(r.run, set()).add(r.frame_id)
    frame_sets = list(runs.values())
    if any(s != frame_sets[0] for s in frame_sets[1:]):
        raise ValueError("runs cover different frame sets")
    n = len(records)
    pre = math.fsum(r.pre_ms for r in records) / n
    inf = math.fsum(r.infer_ms for r in records) / n
    post = math.fsum(r.post_ms for r in records) / n
    total = math.fsum(r.total_ms for r in records) / n
    fps = 1000.0 / total if total > 0 else math.inf
    return TimingSummary(pre, inf, post, total, fps, n)


@dataclass(frozen=True)
class PowerSample:
    t: float
    watts: float

    def __post_init__(self):
        if not float(self.watts) >= 0:
            raise ValueError(f"power must be >= 0 W, got {self.watts}")


def load_power_log(path) -> list[PowerSample]:
    """Read a ``t_seconds,watts`` CSV file."""
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["t_seconds", "watts"]:
            raise ValueError(f"{path}: expected header 't_seconds,watts', got {reader.fieldnames}")
        for line, row in enumerate(reader, start=2):
            try:
                samples.append(PowerSample(float(row["t_seconds"]), float(row["watts"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line}: {exc}") from exc
    for prev, cur in zip(samples, samples[1:]):
        if cur.t < prev.t:
            raise ValueError(f"{path}: samples are not time-ordered at t={cur.t}")
    return samples


def write_power_log(path, samples: Iterable[PowerSample]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_seconds", "watts"])
        for s in samples:
            w.writerow([repr(float(s.t)), repr(float(s.watts))])
    return path


@dataclass(frozen=True)
class PowerReading:
    """Power over a window, kept exact so ``relative + idle == absolute``.

    When the measured draw is below idle the relative power is clamped to
    zero and ``clamped`` is set.
    """

    absolute: Fraction
    idle: Fraction
    relative: Fraction
    clamped: bool = False

    @property
    def absolute_w(self) -> float:
        return float(self.absolute)

    @property
    def idle_w(self) -> float:
        return float(self.idle)

    @property
    def relative_w(self) -> float:
        return float(self.relative)


def split_power(absolute, idle) -> PowerReading:
    """Relative power as ``absolute - idle``, clamped at zero."""
    absolute = Fraction(absolute)
    idle = Fraction(idle)
    if idle < 0 or absolute < 0:
        raise ValueError("power values must be >= 0")
    relative = absolute - idle
    if relative < 0:
        log.warning("absolute power %.3f W is below idle %.3f W; relative clamped to 0", absolute, idle)
        return PowerReading(absolute, idle, Fraction(0), clamped=True)
    return PowerReading(absolute, idle, relative)


def power_from_log(
    samples: Sequence[PowerSample],
    window: tuple[float, float],
    idle_power_w: float,
) -> PowerReading:
    """Mean draw over samples inside ``[t_start, t_end]``, minus idle.

    Raises:
        ValueError: when the window is empty or holds no samples.
    """
    t_start, t_end = window
    if not t_end >= t_start:
        raise ValueError(f"empty power window {window}")
    times = [s.t for s in samples]
    lo = bisect.bisect_left(times, t_start)
    hi = bisect.bisect_right(times, t_end)
    if hi <= lo:
        raise ValueError(f"no power samples inside window [{t_start}, {t_end}]")
    absolute = sum((Fraction(s.watts) for s in samples[lo:hi]), Fraction(0)) / (hi - lo)
    return split_power(absolute, idle_power_w)


def average_power(readings: Sequence[PowerReading]) -> PowerReading:
    """Average absolute power over several windows (e.g. one per run)."""
    if not readings:
        raise ValueError("no power readings to average")
    idle = {r.idle for r in readings}
    if len(idle) != 1:
        raise ValueError("readings use different idle power")
    absolute = sum((r.absolute for r in readings), Fraction(0)) / len(readings)
    return split_power(absolute, idle.pop())


def efficiency(fps: float, relative_power_w: float) -> float:
    """Frames per second per watt of relative power."""
    if not relative_power_w > 0:
        raise ValueError(f"efficiency needs positive relative power, got {relative_power_w}")
    return fps / relative_power_w


@dataclass
class EvaluationReport:
    """Per-target outcome of a benchmark session.

    Derived fields (``mean_total_ms``, ``fps``, ``relative_power_w``,
    ``efficiency_fps_per_w``) are computed here from their inputs and must
    not be passed in inconsistently.
    """

    target_id: str
    run_count: int
    map_50_95: Optional[float] = None
    per_iou_map: Optional[list[float]] = None
    mean_pre_ms: Optional[float] = None
    mean_infer_ms: Optional[float] = None
    mean_post_ms: Optional[float] = None
    mean_total_ms: Optional[float] = None
    fps: Optional[float] = None
    absolute_power_w: Optional[float] = None
    idle_power_w: Optional[float] = None
    relative_power_w: Optional[float] = None
    efficiency_fps_per_w: Optional[float] = None
    power_clamped: bool = False
    precision_label: str = ""
    timing_records: list[TimingRecord] = field(default_factory=list)
    missing_frames: list[int] = field(default_factory=list)
    session: dict = field(default_factory=dict)
    fragments: dict = field(default_factory=dict)
    evaluator_errors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.per_iou_map is not None and len(self.per_iou_map) != len(IOU_THRESHOLDS):
            raise ValueError("per_iou_map needs one value per IoU threshold")
        if self.mean_total_ms is not None:
            expected = 1000.0 / self.mean_total_ms if self.mean_total_ms > 0 else math.inf
            if self.fps is None:
                self.fps = expected
            elif not math.isclose(self.fps, expected, rel_tol=1e-12):
                raise ValueError(f"fps {self.fps} disagrees with mean total {self.mean_total_ms} ms")
        if self.absolute_power_w is not None and self.idle_power_w is not None:
            reading = split_power(self.absolute_power_w, self.idle_power_w)
            if reading.clamped and not self.power_clamped:
                raise ValueError(
                    f"absolute power {self.absolute_power_w} W is below idle {self.idle_power_w} W"
                )
            if self.relative_power_w is None:
                self.relative_power_w = reading.relative_w
            elif self.relative_power_w != reading.relative_w:
                raise ValueError("relative power must equal absolute minus idle")
            if self.fps is not None and reading.relative > 0 and math.isfinite(self.fps):
                expected_eff = efficiency(self.fps, self.relative_power_w)
                if self.efficiency_fps_per_w is None:
                    self.efficiency_fps_per_w = expected_eff
                elif not math.isclose(self.efficiency_fps_per_w, expected_eff, rel_tol=1e-12):
                    raise ValueError("efficiency must equal fps / relative power")
