"""Host-side evaluator plugins.

An evaluator sees a finished session through a read-only
:class:`EvaluationContext` and returns a JSON-friendly fragment for one
target's report.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

from ..metrics import (
    PowerSample,
    TimingRecord,
    aggregate_timing,
    average_power,
    efficiency,
    map_50_95,
    power_from_log,
)
from ..protocol import ResultMessage, SessionConfig
from .dataset import Dataset


@dataclass(frozen=True)
class EvaluationContext:
    config: SessionConfig
    target_id: str
    dataset: Dataset
    results: Mapping[tuple[int, int], ResultMessage]
    run_windows: tuple[tuple[float, float], ...]
    power_log: Optional[Sequence[PowerSample]] = None
    idle_power_w: Optional[float] = None

    def timing_records(self) -> list[TimingRecord]:
        return [
            TimingRecord(frame_id, r.pre_ms, r.infer_ms, r.post_ms, run=run)
            for (run, frame_id), r in sorted(self.results.items())
        ]

    def detections(self, run: int = 1) -> dict[int, tuple]:
        return {fid: r.detections for (rn, fid), r in self.results.items() if rn == run}


def make_context(config, target_id, dataset, results, run_windows, power_log=None, idle_power_w=None):
    return EvaluationContext(
        config=config,
        target_id=target_id,
        dataset=dataset,
        results=MappingProxyType(dict(results)),
        run_windows=tuple(tuple(w) for w in run_windows),
        power_log=tuple(power_log) if power_log is not None else None,
        idle_power_w=idle_power_w,
    )


class Evaluator(abc.ABC):
    name: str = ""

    @abc.abstractmethod
    def evaluate(self, ctx: EvaluationContext) -> dict: ...


class AccuracyEvaluator(Evaluator):
    """mAP@[.5:.95] of the first run's detections (runs are deterministic)."""

    name = "accuracy"

    def evaluate(self, ctx):
        overall, per_iou = map_50_95(ctx.detections(run=1), ctx.dataset.ground_truth())
        return {"map_50_95": overall, "per_iou_map": per_iou}


class TimingEvaluator(Evaluator):
    name = "timing"

    def evaluate(self, ctx):
        s = aggregate_timing(ctx.timing_records())
        return {
            "mean_pre_ms": s.mean_pre_ms,
            "mean_infer_ms": s.mean_infer_ms,
            "mean_post_ms": s.mean_post_ms,
            "mean_total_ms": s.mean_total_ms,
            "fps": s.fps,
            "record_count": s.count,
        }


class PowerEvaluator(Evaluator):
    """Absolute/relative power per run window, averaged, plus FPS/W."""

    name = "power"

    def evaluate(self, ctx):
        if ctx.power_log is None or ctx.idle_power_w is None:
            return {"available": False}
        readings = [power_from_log(ctx.power_log, w, ctx.idle_power_w) for w in ctx.run_windows]
        reading = average_power(readings)
        fps = aggregate_timing(ctx.timing_records()).fps
        eff = efficiency(fps, reading.relative_w) if reading.relative > 0 and math.isfinite(fps) else None
        return {
            "available": True,
            "absolute_w": reading.absolute_w,
            "idle_w": reading.idle_w,
            "relative_w": reading.relative_w,
            "clamped": reading.clamped,
            "efficiency_fps_per_w": eff,
        }


class EvaluatorRegistry:
    """Evaluators run, in registration order, once a session has drained."""

    def __init__(self, defaults: bool = True):
        self._evaluators: dict[str, Evaluator] = {}
        if defaults:
            for ev in (AccuracyEvaluator(), TimingEvaluator(), PowerEvaluator()):
                self.register(ev.name, ev)

    def register(self, name: str, plugin: Evaluator) -> "EvaluatorRegistry":
        if name in self._evaluators:
            raise ValueError(f"evaluator {name!r} is already registered")
        self._evaluators[name] = plugin
        return self

    def items(self):
        return list(self._evaluators.items())

    def names(self) -> list[str]:
        return list(self._evaluators)
