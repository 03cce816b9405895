from __future__ import annotations

import itertools
import logging
import threading
from typing import Dict, List, Optional, Tuple

import paho.mqtt.client as mqtt

from app.config import BROKER_HOST, BROKER_PORT
from app.errors import TransportError
from app.transport import MessageHandler, topic_matches, validate_filter, validate_topic

QOS = 1


class MqttBroker:
    """
    Adapter from the broker contract to a real MQTT v3.1.1 broker via paho.

    - connect(host, port, client_id) once; loop runs in paho's own thread
    - subscriptions are kept locally and re-sent after every reconnect
    - incoming messages are matched locally, like the in-memory broker does
    - QoS 1 (at-least-once); fleet_control deduplicates by message id
    """

    def __init__(self, client_id: str, host: str = BROKER_HOST, port: int = BROKER_PORT, keepalive: int = 60):
        self.broker_id = f"mqtt://{host}:{port}"
        self.client_id = client_id
        self.host = host
        self.port = port
        self.keepalive = keepalive

        self._client = mqtt.Client(mqtt.CallbackAPIVersion.VERSION2, client_id=client_id)
        self._client.on_connect = self._on_connect
        self._client.on_disconnect = self._on_disconnect
        self._client.on_message = self._on_message

        self._lock = threading.RLock()
        self._ids = itertools.count(1)
        self._subs: Dict[int, Tuple[str, str, MessageHandler]] = {}
        self._connected = threading.Event()
        self._closed = False

    def connect(self, timeout: float = 10.0) -> "MqttBroker":
        try:
            self._client.connect(self.host, self.port, keepalive=self.keepalive)
        except OSError as e:
            raise TransportError(f"cannot reach MQTT broker at {self.host}:{self.port}: {e}") from e
        self._client.loop_start()
        if not self._connected.wait(timeout):
            self._client.loop_stop()
            raise TransportError(f"MQTT broker at {self.host}:{self.port} did not acknowledge the connection")
        logging.info(f"{self.client_id}: ✅ CONNECTED to {self.broker_id}")
        return self

    # ---------- MQTT callbacks ----------

    def _on_connect(self, client, userdata, flags, reason_code, properties=None):
        if reason_code.is_failure:
            logging.error(f"{self.client_id}: ❌ MQTT connect refused: {reason_code}")
            return
        self._connected.set()
        # Re-subscribe after reconnect
        with self._lock:
            filters = {f for _, f, _ in self._subs.values()}
        for f in filters:
            client.subscribe(f, qos=QOS)

    def _on_disconnect(self, client, userdata, flags, reason_code, properties=None):
        self._connected.clear()
        if not self._closed:
            logging.warning(f"{self.client_id}: MQTT connection lost ({reason_code}); paho will retry")

    def _on_message(self, client, userdata, msg):
        with self._lock:
            handlers = [h for _, f, h in self._subs.values() if topic_matches(f, msg.topic)]
        for handler in handlers:
            try:
                handler(msg.topic, bytes(msg.payload))
            except Exception as e:
                logging.exception(f"{self.client_id}: handler error on {msg.topic}: {e}")

    # ---------- Broker contract ----------

    def publish(self, topic: str, payload: bytes) -> int:
        validate_topic(topic)
        if self._closed:
            raise TransportError("MQTT adapter is shut down")
        info = self._client.publish(topic, bytes(payload), qos=QOS)
        if info.rc != mqtt.MQTT_ERR_SUCCESS:
            raise TransportError(f"publish to {topic} failed: {mqtt.error_string(info.rc)}")
        # Remote delivery count is not observable over MQTT.
        return 0

    def subscribe(self, topic_filter: str, handler: MessageHandler, endpoint: str = "anonymous") -> int:
        validate_filter(topic_filter)
        with self._lock:
            for sub_id, (ep, f, _) in self._subs.items():
                if ep == endpoint and f == topic_filter:
                    return sub_id
            sub_id = next(self._ids)
            first = all(f != topic_filter for _, f, _ in self._subs.values())
            self._subs[sub_id] = (endpoint, topic_filter, handler)
        if first:
            self._client.subscribe(topic_filter, qos=QOS)
        return sub_id

    def unsubscribe(self, subscription_id: int) -> bool:
        with self._lock:
            entry = self._subs.pop(subscription_id, None)
            if entry is None:
                return False
            still_used = any(f == entry[1] for _, f, _ in self._subs.values())
        if not still_used:
            self._client.unsubscribe(entry[1])
        return True

    def subscriptions(self, endpoint: Optional[str] = None) -> List[Tuple[str, str]]:
        with self._lock:
            return sorted((ep, f) for ep, f, _ in self._subs.values() if endpoint is None or ep == endpoint)

    def shutdown(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._client.disconnect()
        finally:
            self._client.loop_stop()
        logging.info(f"{self.client_id}: disconnected from {self.broker_id}")
