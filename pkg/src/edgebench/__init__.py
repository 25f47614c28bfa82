"""Distributed benchmarking of object detectors on embedded targets.

A host streams frames over publish/subscribe to one or more targets, the
targets answer with detections and per-stage timings, and the host scores
accuracy (COCO mAP@[.5:.95]), latency, throughput, power and FPS/W.
"""

from .metrics import EvaluationReport, map_50_95
from .protocol import FrameMessage, ResultMessage, SessionConfig, StatusMessage, decode_message, encode_message, topic_for
from .vision import Box, Detection, GroundTruthBox, iou, nms

__version__ = "0.1.0"

__all__ = [
    "Box",
    "Detection",
    "EvaluationReport",
    "FrameMessage",
    "GroundTruthBox",
    "ResultMessage",
    "SessionConfig",
    "StatusMessage",
    "decode_message",
    "encode_message",
    "iou",
    "map_50_95",
    "nms",
    "topic_for",
]
