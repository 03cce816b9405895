"""
Pub/sub message fabric.

- topic validation and MQTT v3.1.1 filter matching (`+` one level, `#` suffix)
- InMemoryBroker: synchronous matching, asynchronous per-subscription dispatch
- bridge_link: forwards matching publishes between brokers, loop-free via hop sets
- LatencyModel: optional per-message + per-byte delay injected before delivery

Every broker (in-memory or the paho adapter) offers the same surface:
publish / subscribe / unsubscribe / shutdown, so the layers above never know
which one they run on.
"""
from __future__ import annotations

import itertools
import logging
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Deque, Dict, FrozenSet, Iterable, List, Optional, Protocol, Tuple

from app.config import DISPATCH_WORKERS
from app.errors import TopicValidationError, TransportError

MessageHandler = Callable[[str, bytes], None]


# ----------------------------------------
# TOPICS
# ----------------------------------------
def _check_common(path: str, what: str) -> None:
    if not isinstance(path, str) or not path:
        raise TopicValidationError(f"{what} must be a non-empty string")
    if "\x00" in path:
        raise TopicValidationError(f"{what} contains NUL: {path!r}")


def validate_topic(topic: str) -> str:
    _check_common(topic, "topic")
    if "+" in topic or "#" in topic:
        raise TopicValidationError(f"wildcards are not allowed in topic names: {topic!r}")
    return topic


def validate_filter(topic_filter: str) -> str:
    _check_common(topic_filter, "topic filter")
    levels = topic_filter.split("/")
    for i, level in enumerate(levels):
        if "#" in level and (level != "#" or i != len(levels) - 1):
            raise TopicValidationError(f"'#' must be a whole, final level: {topic_filter!r}")
        if "+" in level and level != "+":
            raise TopicValidationError(f"'+' must occupy a whole level: {topic_filter!r}")
    return topic_filter


def topic_matches(topic_filter: str, topic: str) -> bool:
    validate_filter(topic_filter)
    validate_topic(topic)

    f = topic_filter.split("/")
    t = topic.split("/")

    # Topics starting with '$' are never matched by a leading wildcard.
    if t[0].startswith("$") and f[0] in ("+", "#"):
        return False

    for i, level in enumerate(f):
        if level == "#":
            return True
        if i >= len(t):
            return False
        if level != "+" and level != t[i]:
            return False

    return len(f) == len(t)


# ----------------------------------------
# LATENCY
# ----------------------------------------
@dataclass(frozen=True)
class LatencyModel:
    per_message_ms: float = 0.0
    per_byte_ns: float = 0.0

    def cost_ms(self, nbytes: int) -> float:
        return self.per_message_ms + self.per_byte_ns * nbytes / 1e6

    @property
    def is_zero(self) -> bool:
        return self.per_message_ms == 0 and self.per_byte_ns == 0


class Broker(Protocol):
    broker_id: str

    def publish(self, topic: str, payload: bytes) -> int: ...

    def subscribe(self, topic_filter: str, handler: MessageHandler, endpoint: str = "anonymous") -> int: ...

    def unsubscribe(self, subscription_id: int) -> bool: ...

    def shutdown(self) -> None: ...


# ----------------------------------------
# SUBSCRIPTIONS
# ----------------------------------------
class Subscription:
    """
    One (endpoint, filter) pair. Deliveries are queued here and drained by at
    most one executor task at a time, so a handler never runs concurrently
    with itself and sees messages in publish order.
    """

    def __init__(self, sub_id: int, endpoint: str, topic_filter: str, handler: MessageHandler):
        self.id = sub_id
        self.endpoint = endpoint
        self.filter = topic_filter
        self.handler = handler
        self.active = True

        self._queue: Deque[Tuple[str, bytes]] = deque()
        self._scheduled = False
        self._queue_lock = threading.Lock()
        # Held while the handler runs; unsubscribe waits on it.
        self._call_lock = threading.RLock()


class InMemoryBroker:
    """
    Hermetic broker used for tests, the embedded deployment and the harness.
    Internally synchronized: publish/subscribe may be called from any thread,
    including from inside a handler.
    """

    def __init__(
        self,
        broker_id: str = "local",
        *,
        executor: Optional[ThreadPoolExecutor] = None,
        latency: Optional[LatencyModel] = None,
    ):
        self.broker_id = broker_id
        self.latency = latency

        self._own_executor = executor is None
        self._executor = executor or ThreadPoolExecutor(
            max_workers=DISPATCH_WORKERS, thread_name_prefix=f"broker-{broker_id}"
        )

        self._lock = threading.RLock()
        self._ids = itertools.count(1)
        self._subs: Dict[int, Subscription] = {}
        self._by_key: Dict[Tuple[str, str], int] = {}
        self._bridges: Dict[int, "BridgeLink"] = {}
        self._closed = False

        self._pending = 0
        self._idle = threading.Condition(threading.Lock())

        self.published_count = 0
        self.delivered_bytes = 0

    # ----------------------------------------
    # SUBSCRIBE / UNSUBSCRIBE
    # ----------------------------------------
    def subscribe(self, topic_filter: str, handler: MessageHandler, endpoint: str = "anonymous") -> int:
        validate_filter(topic_filter)
        with self._lock:
            self._ensure_open()
            key = (endpoint, topic_filter)
            existing = self._by_key.get(key)
            if existing is not None:
                return existing

            sub_id = next(self._ids)
            self._subs[sub_id] = Subscription(sub_id, endpoint, topic_filter, handler)
            self._by_key[key] = sub_id

        logging.debug(f"[{self.broker_id}] {endpoint} subscribed to {topic_filter} (#{sub_id})")
        return sub_id

    def unsubscribe(self, subscription_id: int) -> bool:
        with self._lock:
            sub = self._subs.pop(subscription_id, None)
            if sub is None:
                return False
            self._by_key.pop((sub.endpoint, sub.filter), None)

        with sub._queue_lock:
            sub.active = False
            dropped = len(sub._queue)
            sub._queue.clear()
        self._done(dropped)

        # Wait for an in-flight call to finish (reentrant if called from it).
        with sub._call_lock:
            pass

        logging.debug(f"[{self.broker_id}] unsubscribed #{subscription_id} ({sub.filter})")
        return True

    def subscriptions(self, endpoint: Optional[str] = None) -> List[Tuple[str, str]]:
        with self._lock:
            return sorted(
                (s.endpoint, s.filter)
                for s in self._subs.values()
                if endpoint is None or s.endpoint == endpoint
            )

    # ----------------------------------------
    # PUBLISH
    # ----------------------------------------
    def publish(self, topic: str, payload: bytes, *, _hops: FrozenSet[str] = frozenset()) -> int:
        validate_topic(topic)
        payload = bytes(payload)

        with self._lock:
            self._ensure_open()
            targets = [s for s in self._subs.values() if topic_matches(s.filter, topic)]
            bridges = list(self._bridges.values())
            self.published_count += 1

        for sub in targets:
            self._enqueue(sub, topic, payload)

        hops = _hops | {self.broker_id}
        for link in bridges:
            peer = link.peer_of(self)
            if peer.broker_id in hops or not link.carries(topic):
                continue
            try:
                peer.publish(topic, payload, _hops=hops)
            except TransportError as e:
                logging.warning(f"[{self.broker_id}] bridge #{link.id} to {peer.broker_id} failed: {e}")

        return len(targets)

    def _enqueue(self, sub: Subscription, topic: str, payload: bytes) -> None:
        with sub._queue_lock:
            if not sub.active:
                return
            sub._queue.append((topic, payload))
            with self._idle:
                self._pending += 1
            if sub._scheduled:
                return
            sub._scheduled = True

        try:
            self._executor.submit(self._drain, sub)
        except RuntimeError:
            # Executor already shut down
            with sub._queue_lock:
                sub._scheduled = False
                dropped = len(sub._queue)
                sub._queue.clear()
            self._done(dropped)

    def _drain(self, sub: Subscription) -> None:
        while True:
            with sub._queue_lock:
                if not sub.active or not sub._queue:
                    sub._scheduled = False
                    return
                topic, payload = sub._queue.popleft()

            try:
                if self.latency is not None and not self.latency.is_zero:
                    time.sleep(self.latency.cost_ms(len(payload)) / 1000.0)

                with sub._call_lock:
                    if sub.active:
                        self.delivered_bytes += len(payload)
                        sub.handler(topic, payload)
            except Exception as e:
                logging.exception(f"[{self.broker_id}] handler error on {topic} for {sub.endpoint}: {e}")
            finally:
                self._done(1)

    def _done(self, n: int) -> None:
        if n <= 0:
            return
        with self._idle:
            self._pending -= n
            if self._pending <= 0:
                self._pending = 0
                self._idle.notify_all()

    # ----------------------------------------
    # LIFECYCLE
    # ----------------------------------------
    def flush(self, timeout: float = 10.0) -> bool:
        """Block until every queued delivery has been handled."""
        deadline = time.monotonic() + timeout
        with self._idle:
            while self._pending > 0:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._idle.wait(remaining)
        return True

    @property
    def closed(self) -> bool:
        return self._closed

    def shutdown(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            subs = list(self._subs.values())
            self._subs.clear()
            self._by_key.clear()
            for link in list(self._bridges.values()):
                link.detach()

        for sub in subs:
            with sub._queue_lock:
                sub.active = False
                sub._queue.clear()

        if self._own_executor:
            self._executor.shutdown(wait=False, cancel_futures=True)
        with self._idle:
            self._pending = 0
            self._idle.notify_all()
        logging.info(f"[{self.broker_id}] broker shut down.")

    def _ensure_open(self) -> None:
        if self._closed:
            raise TransportError(f"broker {self.broker_id} is shut down")


# ----------------------------------------
# BRIDGING
# ----------------------------------------
_bridge_ids = itertools.count(1)


class BridgeLink:
    def __init__(self, a: InMemoryBroker, b: InMemoryBroker, filters: Iterable[str]):
        self.id = next(_bridge_ids)
        self.a = a
        self.b = b
        self.filters = tuple(validate_filter(f) for f in filters)

    def peer_of(self, broker: InMemoryBroker) -> InMemoryBroker:
        return self.b if broker is self.a else self.a

    def carries(self, topic: str) -> bool:
        return any(topic_matches(f, topic) for f in self.filters)

    def detach(self) -> None:
        self.a._bridges.pop(self.id, None)
        self.b._bridges.pop(self.id, None)


def _reachable(src: InMemoryBroker, dst: InMemoryBroker) -> bool:
    seen = {id(src)}
    stack = [src]
    while stack:
        node = stack.pop()
        for link in list(node._bridges.values()):
            peer = link.peer_of(node)
            if peer is dst:
                return True
            if id(peer) not in seen:
                seen.add(id(peer))
                stack.append(peer)
    return False


def bridge_link(a: InMemoryBroker, b: InMemoryBroker, filters: Iterable[str]) -> int:
    if a is b or a.broker_id == b.broker_id:
        raise TransportError("cannot bridge a broker to itself")

    filters = list(filters)
    if not filters:
        raise TopicValidationError("a bridge needs at least one topic filter")

    first, second = sorted((a, b), key=lambda broker: broker.broker_id)
    with first._lock, second._lock:
        a._ensure_open()
        b._ensure_open()
        for link in a._bridges.values():
            if link.peer_of(a) is b:
                raise TransportError(f"brokers {a.broker_id} and {b.broker_id} are already bridged")
        if _reachable(a, b):
            raise TransportError(f"bridging {a.broker_id} and {b.broker_id} would close a loop")
        link = BridgeLink(a, b, filters)
        a._bridges[link.id] = link
        b._bridges[link.id] = link

    logging.info(f"🔗 Bridged {a.broker_id} <-> {b.broker_id} on {', '.join(link.filters)}")
    return link.id
