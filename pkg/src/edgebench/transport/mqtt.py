"""Endpoint backed by an external MQTT 3.1.1 broker (via paho-mqtt)."""

from __future__ import annotations

import logging
import threading
import time
from typing import Optional

import paho.mqtt.client as paho

from .base import (
    DEFAULT_MAX_PAYLOAD,
    ConnectionState,
    DeliveryPolicy,
    Endpoint,
    Handler,
    Subscription,
    TransportError,
)

log = logging.getLogger(__name__)


class BrokerUnreachableError(TransportError):
    pass


def parse_address(address: str, default_port: int = 1883) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep:
        return address, default_port
    return host, int(port)


class MqttEndpoint(Endpoint):
    """Publish/subscribe over a standard MQTT broker.

    QoS 1 is used when the policy asks for at-least-once delivery, QoS 0
    otherwise. paho runs all callbacks on its single network thread, which
    gives the one-handler-at-a-time guarantee for free.
    """

    def __init__(
        self,
        client_id: str,
        host: str,
        port: int = 1883,
        policy: Optional[DeliveryPolicy] = None,
        max_payload: int = DEFAULT_MAX_PAYLOAD,
        keepalive: int = 30,
        connect_attempts: int = 5,
        backoff_s: float = 0.5,
        max_backoff_s: float = 8.0,
    ):
        super().__init__(client_id, max_payload)
        self.host = host
        self.port = port
        self.policy = policy or DeliveryPolicy()
        self.keepalive = keepalive
        self.connect_attempts = connect_attempts
        self.backoff_s = backoff_s
        self.max_backoff_s = max_backoff_s
        self._qos = 1 if self.policy.at_least_once else 0
        self._connected = threading.Event()
        self._client = paho.Client(paho.CallbackAPIVersion.VERSION2, client_id=client_id, clean_session=True)
        self._client.on_connect = self._on_connect
        self._client.on_disconnect = self._on_disconnect
        self._client.on_message = self._on_message

    def _on_connect(self, client, userdata, flags, reason_code, properties):
        if reason_code.is_failure:
            log.warning("broker refused %s: %s", self.client_id, reason_code)
            return
        self.state = ConnectionState.CONNECTED
        # clean sessions lose subscriptions; restore them
        for filt in self.subscriptions:
            client.subscribe(filt, qos=self._qos)
        self._connected.set()

    def _on_disconnect(self, client, userdata, flags, reason_code, properties):
        self.state = ConnectionState.DISCONNECTED
        self._connected.clear()

    def _on_message(self, client, userdata, message):
        for handler in self._handlers_for(message.topic):
            try:
                handler(message.topic, bytes(message.payload))
            except Exception:
                log.exception("handler failed for topic %s", message.topic)

    def connect(self, timeout: float = 5.0) -> None:
        """Connect with exponential backoff; raise after the configured attempts."""
        delay = self.backoff_s
        last_error: Optional[Exception] = None
        for attempt in range(1, self.connect_attempts + 1):
            try:
                self._client.connect(self.host, self.port, keepalive=self.keepalive)
                self._client.loop_start()
                if self._connected.wait(timeout):
                    return
                self._client.loop_stop()
                last_error = TimeoutError("no CONNACK")
            except OSError as exc:
                last_error = exc
            log.warning(
                "connect %s to %s:%s failed (attempt %d/%d): %s",
                self.client_id, self.host, self.port, attempt, self.connect_attempts, last_error,
            )
            if attempt < self.connect_attempts:
                time.sleep(delay)
                delay = min(delay * 2, self.max_backoff_s)
        raise BrokerUnreachableError(f"could not reach broker at {self.host}:{self.port}: {last_error}")

    def disconnect(self) -> None:
        if self.state is ConnectionState.CONNECTED:
            self._client.disconnect()
        self._client.loop_stop()
        self.state = ConnectionState.DISCONNECTED

    def publish(self, topic: str, payload: bytes) -> None:
        self._check_publish(topic, payload)
        info = self._client.publish(topic, payload, qos=self._qos)
        if info.rc != paho.MQTT_ERR_SUCCESS:
            raise TransportError(f"publish to {topic} failed: {paho.error_string(info.rc)}")

    def subscribe(self, topic_filter: str, handler: Handler) -> Subscription:
        sub = self._add_subscription(topic_filter, handler)
        rc, _ = self._client.subscribe(topic_filter, qos=self._qos)
        if rc != paho.MQTT_ERR_SUCCESS:
            self._subscriptions.pop(sub.token, None)
            raise TransportError(f"subscribe to {topic_filter} failed: {paho.error_string(rc)}")
        return sub

    def unsubscribe(self, subscription: Subscription) -> None:
        self._subscriptions.pop(subscription.token, None)
        if subscription.topic_filter not in self.subscriptions and self.connected:
            self._client.unsubscribe(subscription.topic_filter)
