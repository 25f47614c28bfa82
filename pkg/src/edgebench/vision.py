"""Box geometry and the detector pre-/post-processing pipeline.

Boxes are corner-form ``(x0, y0, x1, y1)`` in source-image pixel coordinates.
Center-form conversion is left to detector plugins.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import cv2
import numpy as np


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            # adding 0.0 turns -0.0 into 0.0 so equal boxes encode identically
            value = float(getattr(self, name)) + 0.0
            if not np.isfinite(value):
                raise ValueError(f"box coordinate {name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def scaled(self, sx: float, sy: float) -> "Box":
        return Box(self.x0 * sx, self.y0 * sy, self.x1 * sx, self.y1 * sy)

    def clipped(self, width: float, height: float) -> "Box":
        x0 = min(max(self.x0, 0.0), width)
        y0 = min(max(self.y0, 0.0), height)
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        return Box(x0, y0, x1, y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float

    def __post_init__(self):
        if isinstance(self.class_id, bool) or int(self.class_id) != self.class_id or self.class_id < 0:
            raise ValueError(f"class_id must be a non-negative integer, got {self.class_id!r}")
        object.__setattr__(self, "class_id", int(self.class_id))
        conf = float(self.confidence) + 0.0
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {conf}")
        object.__setattr__(self, "confidence", conf)


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box
    class_id: int
    frame_id: int

    def __post_init__(self):
        if int(self.class_id) != self.class_id or self.class_id < 0:
            raise ValueError(f"class_id must be a non-negative integer, got {self.class_id!r}")
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "frame_id", int(self.frame_id))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Zero-area boxes score 0 against everything, themselves included.
    """
    area_a = a.area
    area_b = b.area
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def filter_by_confidence(dets: Iterable[Detection], threshold: float) -> list[Detection]:
    """Keep detections with ``confidence >= threshold``, preserving order."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return [d for d in dets if d.confidence >= threshold]


def _confidence_order(dets: Sequence[Detection]) -> list[int]:
    # descending confidence, ties by lower original index
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Per-class greedy non-maximum suppression.

    A detection is suppressed when a kept detection of the same class overlaps
    it with IoU strictly greater than ``iou_threshold``. The result is sorted by
    descending confidence.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    kept: list[Detection] = []
    kept_by_class: dict[int, list[Box]] = {}
    for i in _confidence_order(dets):
        det = dets[i]
        same_class = kept_by_class.setdefault(det.class_id, [])
        if any(iou(det.box, other) > iou_threshold for other in same_class):
            continue
        same_class.append(det.box)
        kept.append(det)
    return kept


@dataclass(frozen=True)
class PreparedInput:
    """Model-ready tensor plus what is needed to map outputs back.

    ``tensor`` is ``float32`` with shape ``(height, width, channels)`` and values
    in ``[0, 1]``. ``scale_x``/``scale_y`` map source coordinates to model-input
    coordinates (``model = source * scale``).
    """

    tensor: np.ndarray
    scale_x: float
    scale_y: float
    source_width: int
    source_height: int
    frame_id: int = -1


def preprocess(image: np.ndarray, target_w: int, target_h: int, frame_id: int = -1) -> PreparedInput:
    """Plain bilinear resize to ``target_w`` x ``target_h`` and scale to [0, 1]."""
    if image.ndim == 2:
        image = image[:, :, None]
    rows, cols = image.shape[:2]
    if rows == 0 or cols == 0 or image.size == 0:
        raise ValueError("cannot preprocess a zero-sized frame")
    if target_w <= 0 or target_h <= 0:
        raise ValueError(f"target size must be positive, got {target_w}x{target_h}")
    if (cols, rows) == (target_w, target_h):
        resized = image
    else:
        resized = cv2.resize(image, (target_w, target_h), interpolation=cv2.INTER_LINEAR)
        if resized.ndim == 2:
            resized = resized[:, :, None]
    tensor = resized.astype(np.float32) / np.float32(255.0)
    return PreparedInput(
        tensor=tensor,
        scale_x=target_w / cols,
        scale_y=target_h / rows,
        source_width=cols,
        source_height=rows,
        frame_id=frame_id,
    )


def unscale(dets: Iterable[Detection], scale_x: float, scale_y: float) -> list[Detection]:
    """Map detections from model-input coordinates back to the source frame."""
    if scale_x == 1.0 and scale_y == 1.0:
        return list(dets)
    inv_x = 1.0 / scale_x
    inv_y = 1.0 / scale_y
    return [Detection(d.box.scaled(inv_x, inv_y), d.class_id, d.confidence) for d in dets]


def detections_from_array(raw: np.ndarray) -> list[Detection]:
    """Convert an ``(N, 6)`` array of ``x0, y0, x1, y1, confidence, class`` rows."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, 6)
    return [Detection(Box(*row[:4]), int(row[5]), float(row[4])) for row in raw]


def postprocess(
    raw,
    scale_x: float,
    scale_y: float,
    conf_threshold: float,
    nms_threshold: float,
) -> list[Detection]:
    """Un-scale, confidence-filter, then NMS, in that order.

    ``raw`` is either a list of :class:`Detection` or an ``(N, 6)`` array in
    model-input coordinates.
    """
    if isinstance(raw, np.ndarray):
        raw = detections_from_array(raw)
    dets = unscale(raw, scale_x, scale_y)
    dets = filter_by_confidence(dets, conf_threshold)
    return nms(dets, nms_threshold)


def draw_boxes(image: np.ndarray, dets: Iterable[Detection], color=(0, 255, 0)) -> np.ndarray:
    """Return a copy of ``image`` with 1-px box outlines drawn in."""
    out = np.array(image, copy=True)
    rows, cols = out.shape[:2]
    if rows == 0 or cols == 0:
        return out
    color = np.asarray(color, dtype=out.dtype)[: out.shape[2] if out.ndim == 3 else 1]
    for det in dets:
        b = det.box.clipped(cols - 1, rows - 1)
        x0, y0, x1, y1 = (int(round(v)) for v in b.as_tuple())
        out[y0, x0 : x1 + 1] = color
        out[y1, x0 : x1 + 1] = color
        out[y0 : y1 + 1, x0] = color
        out[y0 : y1 + 1, x1] = color
    return out
