"""Messages exchanged between host and targets, and their wire encoding.

Every message is a MessagePack map with short fixed keys. Encoding is
canonical: keys are always written in the same order, integers use the
smallest MessagePack representation and reals are always float64, so equal
messages produce identical bytes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Union

import msgpack
import numpy as np

from .vision import Box, Detection

TOPIC_ROOT = "bench"
# Session id used for announcements made before any session exists.
ANNOUNCE_SESSION = "_announce"


class ProtocolError(ValueError):
    """Base class for wire-level failures."""


class TruncatedMessageError(ProtocolError):
    """The buffer ended before a complete message was read."""


class MalformedMessageError(ProtocolError):
    """The buffer is not a well-formed message map."""


class KindMismatchError(ProtocolError):
    """The buffer holds a different kind of message than expected."""


class InvariantViolationError(ProtocolError):
    """The message is well-formed but breaks a type invariant."""


class Kind(str, enum.Enum):
    CONFIG = "config"
    FRAME = "frame"
    RESULT = "result"
    STATUS = "status"


class TargetState(str, enum.Enum):
    READY = "ready"
    CONFIGURED = "configured"
    ERROR = "error"


def _check_name(value, what: str) -> str:
    if not isinstance(value, str) or not value:
        raise InvariantViolationError(f"{what} must be a non-empty string, got {value!r}")
    if any(c in value for c in "/+#\x00"):
        raise InvariantViolationError(f"{what} may not contain '/', '+', '#' or NUL: {value!r}")
    return value


def _check_fraction(value, what: str) -> float:
    if isinstance(value, bool):
        raise InvariantViolationError(f"{what} must be a real number, got {value!r}")
    value = float(value) + 0.0
    if not 0.0 <= value <= 1.0:
        raise InvariantViolationError(f"{what} must lie in [0, 1], got {value}")
    return value


def _check_count(value, what: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise InvariantViolationError(f"{what} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def _check_ms(value, what: str) -> float:
    if isinstance(value, bool):
        raise InvariantViolationError(f"{what} must be a real number, got {value!r}")
    value = float(value) + 0.0
    if not (math.isfinite(value) and value >= 0.0):
        raise InvariantViolationError(f"{what} must be finite and >= 0, got {value}")
    return value


@dataclass(frozen=True)
class SessionConfig:
    """Experiment description published by the host to every target.

    ``result_topic`` is a prefix; each target publishes to
    ``<result_topic>/<target_id>``.
    """

    session_id: str
    detector_name: str
    input_topic: str
    result_topic: str
    confidence_threshold: float = 0.25
    nms_threshold: float = 0.45
    run_count: int = 1
    echo_annotated_images: bool = False
    model_input_width: int = 512
    model_input_height: int = 512

    def __post_init__(self):
        _check_name(self.session_id, "session_id")
        if not isinstance(self.detector_name, str) or not self.detector_name:
            raise InvariantViolationError("detector_name must be a non-empty string")
        for name in ("input_topic", "result_topic"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise InvariantViolationError(f"{name} must be a non-empty string")
        if self.input_topic == self.result_topic:
            raise InvariantViolationError("input_topic and result_topic must differ")
        object.__setattr__(self, "confidence_threshold", _check_fraction(self.confidence_threshold, "confidence_threshold"))
        object.__setattr__(self, "nms_threshold", _check_fraction(self.nms_threshold, "nms_threshold"))
        object.__setattr__(self, "run_count", _check_count(self.run_count, "run_count", 1))
        if not isinstance(self.echo_annotated_images, (bool, np.bool_)):
            raise InvariantViolationError("echo_annotated_images must be a boolean")
        object.__setattr__(self, "echo_annotated_images", bool(self.echo_annotated_images))
        object.__setattr__(self, "model_input_width", _check_count(self.model_input_width, "model_input_width", 1))
        object.__setattr__(self, "model_input_height", _check_count(self.model_input_height, "model_input_height", 1))

    @classmethod
    def for_session(cls, session_id: str, detector_name: str, **kwargs) -> "SessionConfig":
        """Build a config whose topics follow the standard topic scheme."""
        return cls(
            session_id=session_id,
            detector_name=detector_name,
            input_topic=topic_for(session_id, "input"),
            result_topic=f"{TOPIC_ROOT}/{session_id}/result",
            **kwargs,
        )

    def result_topic_for(self, target_id: str) -> str:
        return f"{self.result_topic}/{_check_name(target_id, 'target_id')}"

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "detector_name": self.detector_name,
            "input_topic": self.input_topic,
            "result_topic": self.result_topic,
            "confidence_threshold": self.confidence_threshold,
            "nms_threshold": self.nms_threshold,
            "run_count": self.run_count,
            "echo_annotated_images": self.echo_annotated_images,
            "model_input_width": self.model_input_width,
            "model_input_height": self.model_input_height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SessionConfig":
        return cls(**data)


@dataclass(frozen=True)
class FrameMessage:
    """One image, row-major with interleaved 8-bit BGR channels."""

    session_id: str
    frame_id: int
    rows: int
    cols: int
    channels: int
    pixel_data: bytes
    end_of_stream: bool = False
    element_type: str = "u8"

    def __post_init__(self):
        _check_name(self.session_id, "session_id")
        object.__setattr__(self, "frame_id", _check_count(self.frame_id, "frame_id"))
        object.__setattr__(self, "rows", _check_count(self.rows, "rows"))
        object.__setattr__(self, "cols", _check_count(self.cols, "cols"))
        object.__setattr__(self, "channels", _check_count(self.channels, "channels"))
        if self.element_type != "u8":
            raise InvariantViolationError(f"unsupported element type {self.element_type!r}")
        if not isinstance(self.pixel_data, (bytes, bytearray, memoryview)):
            raise InvariantViolationError("pixel_data must be a byte buffer")
        object.__setattr__(self, "pixel_data", bytes(self.pixel_data))
        object.__setattr__(self, "end_of_stream", bool(self.end_of_stream))
        if self.end_of_stream:
            if self.pixel_data:
                raise InvariantViolationError("end-of-stream frames must carry no pixel data")
        elif len(self.pixel_data) != self.rows * self.cols * self.channels:
            raise InvariantViolationError(
                f"pixel_data holds {len(self.pixel_data)} bytes but "
                f"{self.rows}x{self.cols}x{self.channels} = {self.rows * self.cols * self.channels} declared"
            )

    @classmethod
    def from_image(cls, session_id: str, frame_id: int, image: np.ndarray) -> "FrameMessage":
        image = np.ascontiguousarray(image, dtype=np.uint8)
        if image.ndim == 2:
            image = image[:, :, None]
        rows, cols, channels = image.shape
        return cls(session_id, frame_id, rows, cols, channels, image.tobytes())

    @classmethod
    def end_marker(cls, session_id: str, frame_id: int = 0) -> "FrameMessage":
        return cls(session_id, frame_id, 0, 0, 0, b"", end_of_stream=True)

    def image(self) -> np.ndarray:
        """Read-only ``(rows, cols, channels)`` uint8 view of the pixels."""
        return np.frombuffer(self.pixel_data, dtype=np.uint8).reshape(self.rows, self.cols, self.channels)


@dataclass(frozen=True)
class ResultMessage:
    session_id: str
    target_id: str
    frame_id: int
    detections: tuple = ()
    pre_ms: float = 0.0
    infer_ms: float = 0.0
    post_ms: float = 0.0
    annotated_image: Optional[FrameMessage] = None

    def __post_init__(self):
        _check_name(self.session_id, "session_id")
        _check_name(self.target_id, "target_id")
        object.__setattr__(self, "frame_id", _check_count(self.frame_id, "frame_id"))
        dets = tuple(self.detections)
        if not all(isinstance(d, Detection) for d in dets):
            raise InvariantViolationError("detections must be Detection instances")
        object.__setattr__(self, "detections", dets)
        for name in ("pre_ms", "infer_ms", "post_ms"):
            object.__setattr__(self, name, _check_ms(getattr(self, name), name))
        if self.annotated_image is not None and not isinstance(self.annotated_image, FrameMessage):
            raise InvariantViolationError("annotated_image must be a FrameMessage")

    @property
    def total_ms(self) -> float:
        return self.pre_ms + self.infer_ms + self.post_ms


@dataclass(frozen=True)
class StatusMessage:
    target_id: str
    state: TargetState
    detail: str = ""

    def __post_init__(self):
        _check_name(self.target_id, "target_id")
        try:
            object.__setattr__(self, "state", TargetState(self.state))
        except ValueError:
            raise InvariantViolationError(f"unknown target state {self.state!r}") from None
        if not isinstance(self.detail, str):
            raise InvariantViolationError("detail must be a string")
        if self.state is TargetState.ERROR and not self.detail:
            raise InvariantViolationError("error status requires a detail message")


Message = Union[SessionConfig, FrameMessage, ResultMessage, StatusMessage]

# Wire keys in canonical order, per kind.
WIRE_KEYS = {
    Kind.CONFIG: ("sid", "det", "tin", "tres", "cthr", "nthr", "runs", "echo", "w", "h"),
    Kind.FRAME: ("sid", "fid", "rows", "cols", "ch", "et", "px", "eos"),
    Kind.RESULT: ("sid", "tid", "fid", "dets", "pre", "inf", "post"),
    Kind.STATUS: ("tid", "st", "msg"),
}
DETECTION_KEYS = ("cls", "conf", "x0", "y0", "x1", "y1")

_KIND_OF_TYPE = {
    SessionConfig: Kind.CONFIG,
    FrameMessage: Kind.FRAME,
    ResultMessage: Kind.RESULT,
    StatusMessage: Kind.STATUS,
}


def kind_of(msg: Message) -> Kind:
    try:
        return _KIND_OF_TYPE[type(msg)]
    except KeyError:
        raise TypeError(f"not a protocol message: {type(msg).__name__}") from None


def _frame_map(m: FrameMessage) -> dict:
    return {
        "sid": m.session_id,
        "fid": m.frame_id,
        "rows": m.rows,
        "cols": m.cols,
        "ch": m.channels,
        "et": m.element_type,
        "px": m.pixel_data,
        "eos": m.end_of_stream,
    }


def _to_map(msg: Message) -> dict:
    if isinstance(msg, SessionConfig):
        return {
            "sid": msg.session_id,
            "det": msg.detector_name,
            "tin": msg.input_topic,
            "tres": msg.result_topic,
            "cthr": msg.confidence_threshold,
            "nthr": msg.nms_threshold,
            "runs": msg.run_count,
            "echo": msg.echo_annotated_images,
            "w": msg.model_input_width,
            "h": msg.model_input_height,
        }
    if isinstance(msg, FrameMessage):
        return _frame_map(msg)
    if isinstance(msg, ResultMessage):
        out = {
            "sid": msg.session_id,
            "tid": msg.target_id,
            "fid": msg.frame_id,
            "dets": [
                {
                    "cls": d.class_id,
                    "conf": d.confidence,
                    "x0": d.box.x0,
                    "y0": d.box.y0,
                    "x1": d.box.x1,
                    "y1": d.box.y1,
                }
                for d in msg.detections
            ],
            "pre": msg.pre_ms,
            "inf": msg.infer_ms,
            "post": msg.post_ms,
        }
        if msg.annotated_image is not None:
            out["img"] = _frame_map(msg.annotated_image)
        return out
    if isinstance(msg, StatusMessage):
        return {"tid": msg.target_id, "st": msg.state.value, "msg": msg.detail}
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def encode_message(msg: Message) -> bytes:
    """Serialize a message to its canonical MessagePack form.

    Messages validate their invariants on construction, so any instance that
    exists can be encoded. Objects mutated around the frozen guard are caught by
    re-validation here.
    """
    kind_of(msg)
    try:
        type(msg)(**{f: getattr(msg, f) for f in msg.__dataclass_fields__})
    except InvariantViolationError as exc:
        raise InvariantViolationError(f"refusing to encode invalid {type(msg).__name__}: {exc}") from exc
    return msgpack.packb(_to_map(msg), use_bin_type=True, use_single_float=False)


def _unpack(buf: bytes):
    unpacker = msgpack.Unpacker(raw=False, strict_map_key=True, max_buffer_size=0)
    unpacker.feed(buf)
    try:
        obj = unpacker.unpack()
    except msgpack.OutOfData:
        raise TruncatedMessageError(f"buffer of {len(buf)} bytes ends mid-message") from None
    except (msgpack.UnpackException, ValueError, TypeError) as exc:
        raise MalformedMessageError(f"undecodable buffer: {exc}") from exc
    if unpacker.tell() != len(buf):
        raise MalformedMessageError(f"{len(buf) - unpacker.tell()} trailing bytes after message")
    return obj


def _require(m: dict, kind: Kind) -> None:
    missing = [k for k in WIRE_KEYS[kind] if k not in m]
    if not missing:
        return
    for other, keys in WIRE_KEYS.items():
        if other is not kind and all(k in m for k in keys):
            raise KindMismatchError(f"expected a {kind.value} message, got a {other.value} message")
    raise MalformedMessageError(f"{kind.value} message lacks keys {missing}")


def _typed(value, types, key):
    if isinstance(value, bool) and bool not in types:
        raise MalformedMessageError(f"field {key!r} has wrong type bool")
    if not isinstance(value, types):
        raise MalformedMessageError(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def _frame_from_map(m: dict) -> FrameMessage:
    _require(m, Kind.FRAME)
    return FrameMessage(
        session_id=_typed(m["sid"], (str,), "sid"),
        frame_id=_typed(m["fid"], (int,), "fid"),
        rows=_typed(m["rows"], (int,), "rows"),
        cols=_typed(m["cols"], (int,), "cols"),
        channels=_typed(m["ch"], (int,), "ch"),
        element_type=_typed(m["et"], (str,), "et"),
        pixel_data=_typed(m["px"], (bytes,), "px"),
        end_of_stream=_typed(m["eos"], (bool,), "eos"),
    )


_REAL = (float, int)


def _detection_from_map(d) -> Detection:
    if not isinstance(d, dict):
        raise MalformedMessageError("detection entry must be a map")
    missing = [k for k in DETECTION_KEYS if k not in d]
    if missing:
        raise MalformedMessageError(f"detection entry lacks keys {missing}")
    try:
        box = Box(*(_typed(d[k], _REAL, k) for k in ("x0", "y0", "x1", "y1")))
        return Detection(box, _typed(d["cls"], (int,), "cls"), _typed(d["conf"], _REAL, "conf"))
    except MalformedMessageError:
        raise
    except ValueError as exc:
        raise InvariantViolationError(str(exc)) from exc


def _from_map(m, kind: Kind) -> Message:
    if not isinstance(m, dict):
        raise MalformedMessageError(f"expected a map, got {type(m).__name__}")
    if kind is Kind.FRAME:
        return _frame_from_map(m)
    _require(m, kind)
    if kind is Kind.CONFIG:
        return SessionConfig(
            session_id=_typed(m["sid"], (str,), "sid"),
            detector_name=_typed(m["det"], (str,), "det"),
            input_topic=_typed(m["tin"], (str,), "tin"),
            result_topic=_typed(m["tres"], (str,), "tres"),
            confidence_threshold=_typed(m["cthr"], _REAL, "cthr"),
            nms_threshold=_typed(m["nthr"], _REAL, "nthr"),
            run_count=_typed(m["runs"], (int,), "runs"),
            echo_annotated_images=_typed(m["echo"], (bool,), "echo"),
            model_input_width=_typed(m["w"], (int,), "w"),
            model_input_height=_typed(m["h"], (int,), "h"),
        )
    if kind is Kind.RESULT:
        dets = _typed(m["dets"], (list,), "dets")
        img = m.get("img")
        return ResultMessage(
            session_id=_typed(m["sid"], (str,), "sid"),
            target_id=_typed(m["tid"], (str,), "tid"),
            frame_id=_typed(m["fid"], (int,), "fid"),
            detections=tuple(_detection_from_map(d) for d in dets),
            pre_ms=_typed(m["pre"], _REAL, "pre"),
            infer_ms=_typed(m["inf"], _REAL, "inf"),
            post_ms=_typed(m["post"], _REAL, "post"),
            annotated_image=None if img is None else _frame_from_map(_typed(img, (dict,), "img")),
        )
    return StatusMessage(
        target_id=_typed(m["tid"], (str,), "tid"),
        state=_typed(m["st"], (str,), "st"),
        detail=_typed(m["msg"], (str,), "msg"),
    )


def decode_message(buf: bytes, expected_kind: Union[Kind, str]) -> Message:
    """Parse ``buf`` as a message of ``expected_kind``.

    Raises:
        TruncatedMessageError: the buffer stops mid-message.
        KindMismatchError: the buffer holds another kind of message.
        InvariantViolationError: the message breaks a type invariant.
        MalformedMessageError: anything else that is not a valid message.
    """
    kind = Kind(expected_kind)
    obj = _unpack(bytes(buf))
    return _from_map(obj, kind)


_TOPIC_KINDS = {"config": False, "input": False, "result": True, "status": True}


def topic_for(session_id: str, kind: str, target_id: Optional[str] = None) -> str:
    """Topic for a session channel.

    ``bench/<sid>/config``, ``bench/<sid>/input``, ``bench/<sid>/result/<tid>``
    and ``bench/<sid>/status/<tid>``.
    """
    kind = kind.value if isinstance(kind, enum.Enum) else kind
    if kind not in _TOPIC_KINDS:
        raise ValueError(f"unknown topic kind {kind!r}")
    _check_name(session_id, "session_id")
    if _TOPIC_KINDS[kind]:
        if target_id is None:
            raise ValueError(f"{kind} topics need a target_id")
        return f"{TOPIC_ROOT}/{session_id}/{kind}/{_check_name(target_id, 'target_id')}"
    if target_id is not None:
        raise ValueError(f"{kind} topics are shared by all targets; no target_id allowed")
    return f"{TOPIC_ROOT}/{session_id}/{kind}"


# Filter a booted target uses to discover sessions.
CONFIG_FILTER = f"{TOPIC_ROOT}/+/config"
