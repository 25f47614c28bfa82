from .dataset import Dataset, DatasetError, FrameRecord, load_annotations, load_dataset, to_coco
from .evaluators import (
    AccuracyEvaluator,
    EvaluationContext,
    Evaluator,
    EvaluatorRegistry,
    PowerEvaluator,
    TimingEvaluator,
)
from .orchestrator import (
    Session,
    SessionError,
    SessionFailed,
    SessionState,
    UnknownTargetError,
    collect_result,
    run_session,
)

__all__ = [
    "AccuracyEvaluator",
    "Dataset",
    "DatasetError",
    "EvaluationContext",
    "Evaluator",
    "EvaluatorRegistry",
    "FrameRecord",
    "PowerEvaluator",
    "Session",
    "SessionError",
    "SessionFailed",
    "SessionState",
    "TimingEvaluator",
    "UnknownTargetError",
    "collect_result",
    "load_annotations",
    "load_dataset",
    "run_session",
    "to_coco",
]
