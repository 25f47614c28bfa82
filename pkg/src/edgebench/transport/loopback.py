"""In-process broker with seeded fault injection.

Each endpoint owns a FIFO delivery queue drained by its own worker thread,
so handlers run off the publisher's thread, one at a time per endpoint, in
publish order. Faults are drawn from a random stream keyed by
``(seed, publisher, topic, subscriber)``; the k-th message of a stream always
gets the same fate no matter how publishing threads interleave.
"""

from __future__ import annotations

import logging
import queue
import random
import threading
import time
from dataclasses import dataclass
from typing import Optional

from .base import DEFAULT_MAX_PAYLOAD, ConnectionState, Endpoint, Handler, Subscription, topic_matches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FaultProfile:
    """Fault injection knobs.

    Attributes:
        duplicate_probability: chance that a delivery is repeated once.
        delay_range: ``(low, high)`` seconds; each delivery waits a uniform
            draw from this range before its handler runs.
        seed: root seed for all fault decisions.
    """

    duplicate_probability: float = 0.0
    delay_range: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.duplicate_probability <= 1.0:
            raise ValueError(f"duplicate_probability must lie in [0, 1], got {self.duplicate_probability}")
        low, high = self.delay_range
        if low < 0 or high < low:
            raise ValueError(f"invalid delay range {self.delay_range}")


@dataclass(frozen=True)
class TraceEntry:
    subscriber: str
    topic: str
    publisher: str
    sequence: int
    copy: int
    delay: float


_STOP = object()


class LoopbackEndpoint(Endpoint):
    def __init__(self, broker: "LoopbackBroker", client_id: str, max_payload: int = DEFAULT_MAX_PAYLOAD):
        super().__init__(client_id, max_payload)
        self._broker = broker
        self._queue: queue.Queue = queue.Queue()
        self._worker: Optional[threading.Thread] = None
        self._lock = threading.Lock()

    def connect(self) -> None:
        with self._lock:
            if self._worker is None or not self._worker.is_alive():
                self._worker = threading.Thread(target=self._drain, name=f"loopback-{self.client_id}", daemon=True)
                self._worker.start()
            self.state = ConnectionState.CONNECTED
        self._broker._attach(self)

    def disconnect(self) -> None:
        self.state = ConnectionState.DISCONNECTED

    def close(self) -> None:
        self.disconnect()
        self._broker._detach(self)
        with self._lock:
            worker, self._worker = self._worker, None
        if worker is not None:
            self._queue.put(_STOP)
            if worker is not threading.current_thread():
                worker.join(timeout=5)

    def publish(self, topic: str, payload: bytes) -> None:
        self._check_publish(topic, payload)
        self._broker._route(self.client_id, topic, bytes(payload))

    def subscribe(self, topic_filter: str, handler: Handler) -> Subscription:
        with self._broker._lock:
            return self._add_subscription(topic_filter, handler)

    def unsubscribe(self, subscription: Subscription) -> None:
        with self._broker._lock:
            self._subscriptions.pop(subscription.token, None)

    def _wants(self, topic: str) -> bool:
        return any(topic_matches(s.topic_filter, topic) for s in self._subscriptions.values())

    def _enqueue(self, topic: str, payload: bytes, delay: float) -> None:
        self._queue.put((topic, payload, delay))

    def _drain(self) -> None:
        while True:
            item = self._queue.get()
            try:
                if item is _STOP:
                    return
                topic, payload, delay = item
                if delay > 0:
                    time.sleep(delay)
                # subscriptions are re-read at dispatch so an unsubscribe
                # takes effect for messages still queued
                for handler in self._handlers_for(topic):
                    try:
                        handler(topic, payload)
                    except Exception:
                        log.exception("handler on %s failed for topic %s", self.client_id, topic)
            finally:
                self._queue.task_done()

    def idle(self) -> bool:
        return self._queue.unfinished_tasks == 0


class LoopbackBroker:
    """In-process stand-in for an MQTT broker.

    Example:
        >>> broker = LoopbackBroker()
        >>> ep = broker.endpoint("host")
    """

    def __init__(self, faults: Optional[FaultProfile] = None, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.faults = faults or FaultProfile()
        self.max_payload = max_payload
        self._lock = threading.RLock()
        self._endpoints: dict[str, LoopbackEndpoint] = {}
        self._streams: dict[tuple[str, str, str], tuple[random.Random, int]] = {}
        self.trace: list[TraceEntry] = []
        self.record_trace = True
        self._taps: list = []

    def endpoint(self, client_id: str, connect: bool = True) -> LoopbackEndpoint:
        """Create an endpoint attached to this broker."""
        with self._lock:
            if client_id in self._endpoints:
                raise ValueError(f"client id {client_id!r} already in use")
        ep = LoopbackEndpoint(self, client_id, self.max_payload)
        if connect:
            ep.connect()
        else:
            self._attach(ep)
        return ep

    def add_tap(self, callback) -> None:
        """Call ``callback(publisher, topic, payload)`` synchronously on every publish."""
        self._taps.append(callback)

    def _attach(self, ep: LoopbackEndpoint) -> None:
        with self._lock:
            current = self._endpoints.get(ep.client_id)
            if current is not None and current is not ep:
                raise ValueError(f"client id {ep.client_id!r} already in use")
            self._endpoints[ep.client_id] = ep

    def _detach(self, ep: LoopbackEndpoint) -> None:
        with self._lock:
            if self._endpoints.get(ep.client_id) is ep:
                del self._endpoints[ep.client_id]

    def _fate(self, publisher: str, topic: str, subscriber: str) -> tuple[int, int, list[float]]:
        key = (publisher, topic, subscriber)
        stream = self._streams.get(key)
        if stream is None:
            rng = random.Random(f"{self.faults.seed}\x00{publisher}\x00{topic}\x00{subscriber}")
            seq = 0
        else:
            rng, seq = stream
        self._streams[key] = (rng, seq + 1)
        p = self.faults.duplicate_probability
        copies = 1
        if p >= 1.0 or (p > 0.0 and rng.random() < p):
            copies = 2
        low, high = self.faults.delay_range
        delays = [rng.uniform(low, high) if high > 0 else 0.0 for _ in range(copies)]
        return seq, copies, delays

    def _route(self, publisher: str, topic: str, payload: bytes) -> None:
        with self._lock:
            for tap in self._taps:
                tap(publisher, topic, payload)
            for name in sorted(self._endpoints):
                ep = self._endpoints[name]
                if not ep.connected or not ep._wants(topic):
                    continue
                seq, copies, delays = self._fate(publisher, topic, name)
                for copy, delay in enumerate(delays):
                    if self.record_trace:
                        self.trace.append(TraceEntry(name, topic, publisher, seq, copy, delay))
                    ep._enqueue(topic, payload, delay)

    def wait_idle(self, timeout: float = 10.0) -> bool:
        """Block until every queued delivery has been handled."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                eps = list(self._endpoints.values())
            if all(ep.idle() for ep in eps):
                return True
            time.sleep(0.001)
        return False

    def close(self) -> None:
        with self._lock:
            eps = list(self._endpoints.values())
        for ep in eps:
            ep.close()


def loopback_broker(
    duplicate_probability: float = 0.0,
    delay_range: tuple[float, float] = (0.0, 0.0),
    seed: int = 0,
) -> LoopbackBroker:
    return LoopbackBroker(FaultProfile(duplicate_probability, delay_range, seed))
