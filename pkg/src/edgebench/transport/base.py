from __future__ import annotations

import abc
import enum
import itertools
from dataclasses import dataclass
from typing import Callable

Handler = Callable[[str, bytes], None]

DEFAULT_MAX_PAYLOAD = 32 * 1024 * 1024


class TransportError(RuntimeError):
    pass


class NotConnectedError(TransportError):
    pass


class PayloadTooLargeError(TransportError):
    pass


class InvalidTopicError(TransportError, ValueError):
    pass


class ConnectionState(str, enum.Enum):
    DISCONNECTED = "disconnected"
    CONNECTED = "connected"


@dataclass(frozen=True)
class DeliveryPolicy:
    """How hard the transport tries, and how far the host may run ahead.

    ``max_in_flight`` bounds frames published to a target but not yet answered
    by a result.
    """

    at_least_once: bool = True
    max_in_flight: int = 4

    def __post_init__(self):
        if int(self.max_in_flight) != self.max_in_flight or self.max_in_flight < 1:
            raise ValueError(f"max_in_flight must be a positive integer, got {self.max_in_flight}")


def validate_topic(topic: str) -> str:
    if not isinstance(topic, str) or not topic or "\x00" in topic:
        raise InvalidTopicError(f"invalid topic {topic!r}")
    if "+" in topic or "#" in topic:
        raise InvalidTopicError(f"wildcards are not allowed in a publish topic: {topic!r}")
    return topic


def validate_filter(topic_filter: str) -> str:
    """Accept literal topics plus the single-level ``+`` wildcard."""
    if not isinstance(topic_filter, str) or not topic_filter or "\x00" in topic_filter:
        raise InvalidTopicError(f"invalid topic filter {topic_filter!r}")
    if "#" in topic_filter:
        raise InvalidTopicError(f"multi-level wildcards are not supported: {topic_filter!r}")
    for level in topic_filter.split("/"):
        if "+" in level and level != "+":
            raise InvalidTopicError(f"'+' must occupy a whole topic level: {topic_filter!r}")
    return topic_filter


def topic_matches(topic_filter: str, topic: str) -> bool:
    fl = topic_filter.split("/")
    tl = topic.split("/")
    if len(fl) != len(tl):
        return False
    return all(f == "+" or f == t for f, t in zip(fl, tl))


@dataclass(frozen=True)
class Subscription:
    topic_filter: str
    handler: Handler
    token: int


_tokens = itertools.count(1)


class Endpoint(abc.ABC):
    """A publish/subscribe client.

    Endpoints only know topics. There is deliberately no way to address
    another endpoint directly.

    Handlers receive ``(topic, payload)``. One endpoint never runs two of its
    handlers at the same time.
    """

    def __init__(self, client_id: str, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.client_id = client_id
        self.max_payload = max_payload
        self.state = ConnectionState.DISCONNECTED
        self._subscriptions: dict[int, Subscription] = {}

    @property
    def connected(self) -> bool:
        return self.state is ConnectionState.CONNECTED

    @property
    def subscriptions(self) -> set[str]:
        return {s.topic_filter for s in self._subscriptions.values()}

    def _check_publish(self, topic: str, payload: bytes) -> None:
        if not self.connected:
            raise NotConnectedError(f"{self.client_id} is not connected")
        validate_topic(topic)
        if len(payload) > self.max_payload:
            raise PayloadTooLargeError(f"payload of {len(payload)} bytes exceeds limit of {self.max_payload}")

    def _add_subscription(self, topic_filter: str, handler: Handler) -> Subscription:
        if not self.connected:
            raise NotConnectedError(f"{self.client_id} is not connected")
        validate_filter(topic_filter)
        sub = Subscription(topic_filter, handler, next(_tokens))
        self._subscriptions[sub.token] = sub
        return sub

    def _handlers_for(self, topic: str) -> list[Handler]:
        return [s.handler for s in list(self._subscriptions.values()) if topic_matches(s.topic_filter, topic)]

    @abc.abstractmethod
    def connect(self) -> None: ...

    @abc.abstractmethod
    def disconnect(self) -> None: ...

    @abc.abstractmethod
    def publish(self, topic: str, payload: bytes) -> None: ...

    @abc.abstractmethod
    def subscribe(self, topic_filter: str, handler: Handler) -> Subscription: ...

    @abc.abstractmethod
    def unsubscribe(self, subscription: Subscription) -> None: ...

    def close(self) -> None:
        self.disconnect()

    def __enter__(self):
        if not self.connected:
            self.connect()
        return self

    def __exit__(self, *exc):
        self.close()
