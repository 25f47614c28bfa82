"""Drives an evaluation session against one or more targets.

Lifecycle: idle -> configuring -> (streaming -> draining) per run ->
evaluating -> done. Any active state may fall to failed.
"""

from __future__ import annotations

import datetime as _dt
import enum
import logging
import threading
import time
from typing import Callable, Iterable, Mapping, Optional, Sequence

from ..metrics import EvaluationReport, PowerSample
from ..protocol import (
    FrameMessage,
    Kind,
    ProtocolError,
    ResultMessage,
    SessionConfig,
    TargetState,
    decode_message,
    encode_message,
    topic_for,
)
from ..transport import DeliveryPolicy, Endpoint
from .dataset import Dataset
from .evaluators import EvaluatorRegistry, make_context

log = logging.getLogger(__name__)


class SessionState(str, enum.Enum):
    IDLE = "idle"
    CONFIGURING = "configuring"
    STREAMING = "streaming"
    DRAINING = "draining"
    EVALUATING = "evaluating"
    DONE = "done"
    FAILED = "failed"


_NEXT = {
    SessionState.IDLE: {SessionState.CONFIGURING},
    SessionState.CONFIGURING: {SessionState.STREAMING},
    SessionState.STREAMING: {SessionState.DRAINING},
    SessionState.DRAINING: {SessionState.STREAMING, SessionState.EVALUATING},
    SessionState.EVALUATING: {SessionState.DONE},
    SessionState.DONE: set(),
    SessionState.FAILED: set(),
}
_ACTIVE = {
    SessionState.CONFIGURING,
    SessionState.STREAMING,
    SessionState.DRAINING,
    SessionState.EVALUATING,
}


class SessionError(RuntimeError):
    pass


class SessionFailed(SessionError):
    def __init__(self, session: "Session", reason: str):
        super().__init__(reason)
        self.session = session
        self.reason = reason


class UnknownTargetError(SessionError, ValueError):
    pass


def _now_iso() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="milliseconds")


class Session:
    """Session bookkeeping, shared by the coordinator and transport callbacks.

    All mutation happens under ``self.lock``; ``self.changed`` is notified on
    every state or result change.
    """

    def __init__(self, config: SessionConfig, targets: Iterable[str], clock: Callable[[], float] = time.monotonic):
        targets = tuple(targets)
        if not targets:
            raise ValueError("a session needs at least one target")
        if len(set(targets)) != len(targets):
            raise ValueError("target ids must be unique")
        self.config = config
        self.targets = targets
        self.clock = clock
        self.state = SessionState.IDLE
        self.run = 0
        self.frame_ids: frozenset[int] = frozenset()
        self.results: dict[tuple[int, int, str], ResultMessage] = {}
        self._raw: dict[tuple[int, int, str], bytes] = {}
        # keys whose stored bytes also match an earlier run, so may be a late echo
        self._provisional: set[tuple[int, int, str]] = set()
        self.failure: Optional[str] = None
        self.missing: dict[str, list[tuple[int, int]]] = {}
        self.acknowledged: set[str] = set()
        self.diagnostics: list[str] = []
        self.run_windows: list[tuple[float, float]] = []
        self.published_in_run = 0
        self.published_ids: set[int] = set()
        self.received_in_run: dict[str, int] = {t: 0 for t in targets}
        self.max_in_flight_seen: dict[str, int] = {t: 0 for t in targets}
        self.duplicates_ignored = 0
        self.last_result_at: Optional[float] = None
        self.epoch = clock()
        self.started_at = ""
        self.finished_at = ""
        self.lock = threading.RLock()
        self.changed = threading.Condition(self.lock)

    def transition(self, new: SessionState) -> None:
        with self.lock:
            if new is SessionState.FAILED:
                if self.state not in _ACTIVE:
                    raise SessionError(f"cannot fail a session in state {self.state.value}")
            elif new not in _NEXT[self.state]:
                raise SessionError(f"illegal transition {self.state.value} -> {new.value}")
            self.state = new
            self.changed.notify_all()

    def fail(self, reason: str) -> None:
        with self.lock:
            if self.state is SessionState.FAILED:
                return
            log.error("session %s failed: %s", self.config.session_id, reason)
            self.failure = reason
            if self.state in _ACTIVE:
                self.transition(SessionState.FAILED)
            else:
                self.state = SessionState.FAILED
                self.changed.notify_all()

    def begin_run(self, run: int) -> None:
        with self.lock:
            self.transition(SessionState.STREAMING)
            self.run = run
            self.published_in_run = 0
            self.published_ids = set()
            self.received_in_run = {t: 0 for t in self.targets}

    def mark_published(self, frame_id: int) -> None:
        """Record that ``frame_id`` went out in the current run."""
        with self.lock:
            self.published_in_run += 1
            self.published_ids.add(frame_id)
            for t in self.targets:
                self.max_in_flight_seen[t] = max(self.max_in_flight_seen[t], self.in_flight(t))

    def _seen_in_earlier_run(self, frame_id: int, target_id: str, raw: bytes) -> bool:
        return any(self._raw.get((r, frame_id, target_id)) == raw for r in range(1, self.run))

    def in_flight(self, target_id: str) -> int:
        return self.published_in_run - self.received_in_run[target_id]

    def collect_result(self, msg: ResultMessage, raw: Optional[bytes] = None) -> None:
        """Store a result under ``(run, frame_id, target_id)``.

        Byte-identical duplicates are ignored, including late copies of a
        result from an earlier run that arrive before the frame is sent
        again. Once it is sent, a copy matching an earlier run is stored
        provisionally: a target may legitimately repeat itself, but if a
        result no earlier run produced turns up, that one replaces it. Any
        other different result for an occupied key fails the session.
        Results for frames not yet published in the current run are
        rejected.
        """
        with self.lock:
            if self.state is SessionState.FAILED:
                return
            if msg.session_id != self.config.session_id:
                self.fail(f"result for session {msg.session_id!r} arrived in session {self.config.session_id!r}")
                return
            if msg.target_id not in self.targets:
                raise UnknownTargetError(f"result from undeclared target {msg.target_id!r}")
            if msg.frame_id not in self.frame_ids:
                raise SessionError(f"result for frame {msg.frame_id} which is not in the dataset")
            raw = raw if raw is not None else encode_message(msg)
            key = (self.run, msg.frame_id, msg.target_id)
            earlier = key not in self._raw and self._seen_in_earlier_run(msg.frame_id, msg.target_id, raw)
            active = self.state in (SessionState.STREAMING, SessionState.DRAINING)
            if earlier and (not active or msg.frame_id not in self.published_ids):
                # a redelivered copy from a previous run that arrived after it closed
                self.duplicates_ignored += 1
                return
            if self.state not in (SessionState.STREAMING, SessionState.DRAINING):
                if self._raw.get(key) == raw:
                    self.duplicates_ignored += 1
                    return
                raise SessionError(f"result for frame {msg.frame_id} arrived while {self.state.value}")
            if msg.frame_id not in self.published_ids:
                raise SessionError(f"result for frame {msg.frame_id} which has not been sent in run {self.run}")
            stored = self._raw.get(key)
            if stored is not None:
                if stored == raw:
                    self.duplicates_ignored += 1
                    return
                if key in self._provisional and not self._seen_in_earlier_run(msg.frame_id, msg.target_id, raw):
                    # the stored copy was a late echo of an earlier run
                    self._provisional.discard(key)
                    self._raw[key] = raw
                    self.results[key] = msg
                    self.duplicates_ignored += 1
                    self.last_result_at = self.clock()
                    self.changed.notify_all()
                    return
                self.fail(
                    f"conflicting results from {msg.target_id} for frame {msg.frame_id} in run {self.run}"
                )
                return
            if earlier:
                self._provisional.add(key)
            self._raw[key] = raw
            self.results[key] = msg
            self.received_in_run[msg.target_id] += 1
            self.last_result_at = self.clock()
            self.changed.notify_all()

    def results_for(self, target_id: str) -> dict[tuple[int, int], ResultMessage]:
        with self.lock:
            return {(run, fid): r for (run, fid, tid), r in self.results.items() if tid == target_id}

    def on_status(self, target_id: str, state: TargetState, detail: str) -> None:
        with self.lock:
            if state is TargetState.CONFIGURED:
                self.acknowledged.add(target_id)
                self.changed.notify_all()
            elif state is TargetState.ERROR:
                msg = f"target {target_id} reported error: {detail}"
                if self.state is SessionState.CONFIGURING:
                    self.fail(msg)
                else:
                    log.warning(msg)
                    self.diagnostics.append(msg)


def collect_result(session: Session, msg: ResultMessage) -> Session:
    session.collect_result(msg)
    return session


def _wait(session: Session, predicate, deadline: float) -> bool:
    """Wait on the session condition until ``predicate`` holds, failure, or deadline."""
    with session.changed:
        while True:
            if session.state is SessionState.FAILED:
                raise SessionFailed(session, session.failure or "session failed")
            if predicate():
                return True
            remaining = deadline - session.clock()
            if remaining <= 0:
                return False
            session.changed.wait(min(remaining, 0.1))


def run_session(
    session: Session,
    endpoint: Endpoint,
    dataset: Dataset,
    power_logs: Optional[Mapping[str, Sequence[PowerSample]]] = None,
    idle_watts: Optional[Mapping[str, float]] = None,
    evaluators: Optional[EvaluatorRegistry] = None,
    policy: Optional[DeliveryPolicy] = None,
    config_timeout: float = 10.0,
    config_retry: float = 0.5,
    drain_timeout: float = 30.0,
    precision_labels: Optional[Mapping[str, str]] = None,
) -> dict[str, EvaluationReport]:
    """Configure the targets, stream every run, drain, and evaluate.

    Power logs are per target, with sample times in seconds since the
    session epoch (``session.epoch`` on the session's clock).

    Returns:
        One :class:`EvaluationReport` per target.

    Raises:
        SessionFailed: config acknowledgement or drain timed out, a target
            reported an error while configuring, or results conflicted.
    """
    if not dataset.frames:
        raise ValueError("dataset has no frames")
    cfg = session.config
    policy = policy or DeliveryPolicy()
    evaluators = evaluators if evaluators is not None else EvaluatorRegistry()
    power_logs = power_logs or {}
    idle_watts = idle_watts or {}
    clock = session.clock
    session.frame_ids = frozenset(dataset.frame_ids)
    session.epoch = clock()
    session.started_at = _now_iso()
    sid = cfg.session_id

    def on_status(topic, payload):
        try:
            status = decode_message(payload, Kind.STATUS)
        except ProtocolError as exc:
            log.warning("undecodable status on %s: %s", topic, exc)
            return
        session.on_status(status.target_id, status.state, status.detail)

    def on_result(topic, payload):
        try:
            result = decode_message(payload, Kind.RESULT)
        except ProtocolError as exc:
            session.fail(f"undecodable result on {topic}: {exc}")
            return
        try:
            session.collect_result(result, payload)
        except SessionError as exc:
            log.warning("ignored result on %s: %s", topic, exc)

    subs = []
    try:
        for tid in session.targets:
            subs.append(endpoint.subscribe(topic_for(sid, "status", tid), on_status))
            subs.append(endpoint.subscribe(cfg.result_topic_for(tid), on_result))

        session.transition(SessionState.CONFIGURING)
        config_bytes = encode_message(cfg)
        deadline = clock() + config_timeout
        acked = lambda: session.acknowledged.issuperset(session.targets)  # noqa: E731
        while True:
            endpoint.publish(topic_for(sid, "config"), config_bytes)
            if _wait(session, acked, min(deadline, clock() + config_retry)):
                break
            if clock() >= deadline:
                missing = sorted(set(session.targets) - session.acknowledged)
                session.fail(f"targets {missing} did not acknowledge the configuration")
                raise SessionFailed(session, session.failure)

        n_frames = len(dataset.frames)
        for run in range(1, cfg.run_count + 1):
            session.begin_run(run)
            window_start = None
            for frame in dataset.frames:
                room = lambda: all(  # noqa: E731
                    session.in_flight(t) < policy.max_in_flight for t in session.targets
                )
                # a stalled pipeline is bounded by the drain timeout
                stall_deadline = clock() + drain_timeout
                if not _wait(session, room, stall_deadline):
                    _fail_missing(session, dataset, "flow control stalled")
                payload = encode_message(FrameMessage.from_image(sid, frame.frame_id, frame.load()))
                with session.lock:
                    if window_start is None:
                        window_start = clock() - session.epoch
                    session.mark_published(frame.frame_id)
                endpoint.publish(cfg.input_topic, payload)
            endpoint.publish(cfg.input_topic, encode_message(FrameMessage.end_marker(sid, run)))
            session.transition(SessionState.DRAINING)
            complete = lambda: all(session.received_in_run[t] == n_frames for t in session.targets)  # noqa: E731
            if not _wait(session, complete, clock() + drain_timeout):
                _fail_missing(session, dataset, "drain timed out")
            with session.lock:
                session.run_windows.append((window_start, session.last_result_at - session.epoch))

        session.transition(SessionState.EVALUATING)
        session.finished_at = _now_iso()
        reports = _evaluate(session, dataset, evaluators, power_logs, idle_watts, precision_labels or {})
        session.transition(SessionState.DONE)
        return reports
    finally:
        for sub in subs:
            endpoint.unsubscribe(sub)


def _fail_missing(session: Session, dataset: Dataset, why: str) -> None:
    with session.lock:
        run = session.run
        for t in session.targets:
            got = {fid for (rn, fid, tid) in session.results if rn == run and tid == t}
            lost = [(run, fid) for fid in dataset.frame_ids if fid not in got]
            if lost:
                session.missing[t] = lost
        summary = {t: [fid for _, fid in v] for t, v in session.missing.items()}
        session.fail(f"{why} in run {run}; missing frames {summary}")
    raise SessionFailed(session, session.failure)


def _evaluate(session, dataset, evaluators, power_logs, idle_watts, precision_labels) -> dict[str, EvaluationReport]:
    reports = {}
    for tid in session.targets:
        ctx = make_context(
            session.config,
            tid,
            dataset,
            session.results_for(tid),
            session.run_windows,
            power_logs.get(tid),
            idle_watts.get(tid),
        )
        fragments, errors = {}, {}
        for name, ev in evaluators.items():
            try:
                fragments[name] = ev.evaluate(ctx) or {}
            except Exception as exc:
                log.warning("evaluator %s failed for %s: %s", name, tid, exc)
                errors[name] = f"{type(exc).__name__}: {exc}"
        reports[tid] = _build_report(session, ctx, fragments, errors, precision_labels.get(tid, ""))
    return reports


def _build_report(session, ctx, fragments, errors, precision_label) -> EvaluationReport:
    acc = fragments.get("accuracy") or {}
    timing = fragments.get("timing") or {}
    power = fragments.get("power") or {}
    has_power = bool(power.get("available"))
    return EvaluationReport(
        target_id=ctx.target_id,
        run_count=session.config.run_count,
        map_50_95=acc.get("map_50_95"),
        per_iou_map=acc.get("per_iou_map"),
        mean_pre_ms=timing.get("mean_pre_ms"),
        mean_infer_ms=timing.get("mean_infer_ms"),
        mean_post_ms=timing.get("mean_post_ms"),
        mean_total_ms=timing.get("mean_total_ms"),
        absolute_power_w=power.get("absolute_w") if has_power else None,
        idle_power_w=power.get("idle_w") if has_power else None,
        power_clamped=bool(power.get("clamped", False)),
        precision_label=precision_label,
        timing_records=ctx.timing_records(),
        missing_frames=[fid for _, fid in session.missing.get(ctx.target_id, [])],
        session={
            "config": session.config.to_dict(),
            "targets": list(session.targets),
            "started_at": session.started_at,
            "finished_at": session.finished_at,
            "run_windows_s": [list(w) for w in session.run_windows],
            "duplicates_ignored": session.duplicates_ignored,
            "max_in_flight_seen": session.max_in_flight_seen.get(ctx.target_id, 0),
            "diagnostics": list(session.diagnostics),
        },
        fragments={k: v for k, v in fragments.items() if k not in ("accuracy", "timing", "power")},
        evaluator_errors=errors,
    )
