from .base import (
    DEFAULT_MAX_PAYLOAD,
    ConnectionState,
    DeliveryPolicy,
    Endpoint,
    InvalidTopicError,
    NotConnectedError,
    PayloadTooLargeError,
    Subscription,
    TransportError,
    topic_matches,
)
from .loopback import FaultProfile, LoopbackBroker, LoopbackEndpoint, TraceEntry, loopback_broker

__all__ = [
    "DEFAULT_MAX_PAYLOAD",
    "ConnectionState",
    "DeliveryPolicy",
    "Endpoint",
    "FaultProfile",
    "InvalidTopicError",
    "LoopbackBroker",
    "LoopbackEndpoint",
    "NotConnectedError",
    "PayloadTooLargeError",
    "Subscription",
    "TraceEntry",
    "TransportError",
    "loopback_broker",
    "topic_matches",
]
