"""
Fleet control: remote function calls bound to topics.

A logical call is (optionally) DEFLATE-compressed, split into batches that
share one message id, and each batch travels as a text envelope:

    sender|function|message_id|index|count|flags\\n<base64 body>

Receivers reassemble batches in any order, drop duplicates, and invoke the
bound handler exactly once per logical message.
"""
from __future__ import annotations

import base64
import binascii
import logging
import math
import threading
import time
import uuid
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, FrozenSet, List, Optional, Set, Tuple

from pydantic import BaseModel

from app.config import (
    CHUNK_LIMIT_BYTES,
    COMPRESS_THRESHOLD_BYTES,
    DEDUP_WINDOW,
    MAX_PAYLOAD_BYTES,
    REASSEMBLY_TIMEOUT_SECONDS,
)
from app.errors import (
    BindingError,
    EnvelopeParseError,
    IntegrityError,
    PayloadSizeError,
    TransportError,
)
from app.transport import Broker, validate_filter, validate_topic

SEPARATOR = "|"
COMPRESSED = "COMPRESSED"
KNOWN_FLAGS = frozenset({COMPRESSED})

FunctionHandler = Callable[[str, bytes], None]


# ----------------------------------------
# ENVELOPE
# ----------------------------------------
@dataclass(frozen=True)
class Envelope:
    sender_id: str
    function_name: str
    message_id: str  # 32 lowercase hex chars (128 bits)
    batch_index: int
    batch_count: int
    flags: FrozenSet[str] = frozenset()
    body: bytes = b""

    @property
    def compressed(self) -> bool:
        return COMPRESSED in self.flags


def new_message_id() -> str:
    return uuid.uuid4().hex


def _check_field(name: str, value: str) -> None:
    if SEPARATOR in value or "\n" in value:
        raise EnvelopeParseError(f"{name} must not contain '|' or newline: {value!r}")


def _validate(e: Envelope) -> None:
    _check_field("sender_id", e.sender_id)
    _check_field("function_name", e.function_name)
    if not e.function_name:
        raise EnvelopeParseError("function_name is empty")
    if len(e.message_id) != 32 or any(c not in "0123456789abcdef" for c in e.message_id):
        raise EnvelopeParseError(f"message_id must be 32 hex chars: {e.message_id!r}")
    if e.batch_count < 1 or not 0 <= e.batch_index < e.batch_count:
        raise EnvelopeParseError(f"batch {e.batch_index}/{e.batch_count} out of range")
    unknown = set(e.flags) - KNOWN_FLAGS
    if unknown:
        raise EnvelopeParseError(f"unknown flags {sorted(unknown)}")


def encode_envelope(e: Envelope) -> bytes:
    _validate(e)
    header = SEPARATOR.join(
        [
            e.sender_id,
            e.function_name,
            e.message_id,
            str(e.batch_index),
            str(e.batch_count),
            ",".join(sorted(e.flags)),
        ]
    )
    return header.encode("utf-8") + b"\n" + base64.b64encode(e.body)


def _parse_int(raw: str, what: str) -> int:
    if not raw.isascii() or not raw.isdigit():
        raise EnvelopeParseError(f"{what} is not a non-negative integer: {raw!r}")
    return int(raw)


def decode_envelope(data: bytes) -> Envelope:
    try:
        head, sep, body = bytes(data).partition(b"\n")
        if not sep:
            raise EnvelopeParseError("missing header terminator")
        try:
            header = head.decode("utf-8")
        except UnicodeDecodeError as e:
            raise EnvelopeParseError(f"header is not UTF-8: {e}") from e

        parts = header.split(SEPARATOR)
        if len(parts) != 6:
            raise EnvelopeParseError(f"expected 6 header fields, got {len(parts)}")
        sender, function, message_id, index, count, flags = parts

        try:
            payload = base64.b64decode(body, validate=True)
        except (binascii.Error, ValueError) as e:
            raise EnvelopeParseError(f"bad base64 body: {e}") from e

        envelope = Envelope(
            sender_id=sender,
            function_name=function,
            message_id=message_id,
            batch_index=_parse_int(index, "batch index"),
            batch_count=_parse_int(count, "batch count"),
            flags=frozenset(f for f in flags.split(",") if f),
            body=payload,
        )
        _validate(envelope)
        # Only canonical encodings are accepted.
        if encode_envelope(envelope) != bytes(data):
            raise EnvelopeParseError("non-canonical envelope encoding")
        return envelope
    except EnvelopeParseError:
        raise
    except Exception as e:
        raise EnvelopeParseError(f"unparseable envelope: {e}") from e


# ----------------------------------------
# COMPRESSION (raw DEFLATE, RFC 1951)
# ----------------------------------------
def compress(payload: bytes, level: int = 6) -> bytes:
    c = zlib.compressobj(level, zlib.DEFLATED, -15)
    return c.compress(bytes(payload)) + c.flush()


def decompress(data: bytes) -> bytes:
    d = zlib.decompressobj(-15)
    try:
        out = d.decompress(bytes(data)) + d.flush()
    except zlib.error as e:
        raise IntegrityError(f"corrupt DEFLATE stream: {e}") from e
    if not d.eof or d.unused_data:
        raise IntegrityError("truncated or trailing data in DEFLATE stream")
    return out


# ----------------------------------------
# BATCHING
# ----------------------------------------
def split_batches(
    payload: bytes,
    chunk_limit: int = CHUNK_LIMIT_BYTES,
    *,
    sender_id: str = "anonymous",
    function_name: str = "call",
    compress_threshold: Optional[int] = COMPRESS_THRESHOLD_BYTES,
    message_id: Optional[str] = None,
) -> List[Envelope]:
    if chunk_limit <= 0:
        raise PayloadSizeError("chunk_limit must be at least 1 byte")

    payload = bytes(payload)
    flags: FrozenSet[str] = frozenset()
    if compress_threshold is not None and len(payload) > compress_threshold:
        payload = compress(payload)
        flags = frozenset({COMPRESSED})

    count = max(1, math.ceil(len(payload) / chunk_limit))
    mid = message_id or new_message_id()
    return [
        Envelope(
            sender_id=sender_id,
            function_name=function_name,
            message_id=mid,
            batch_index=i,
            batch_count=count,
            flags=flags,
            body=payload[i * chunk_limit : (i + 1) * chunk_limit],
        )
        for i in range(count)
    ]


@dataclass
class _Partial:
    expected: int
    flags: FrozenSet[str]
    first_seen: float
    chunks: Dict[int, bytes] = field(default_factory=dict)


class ReassemblyBuffer:
    """
    Collects batches per (sender, message_id) until all indices are present.
    Safe to feed from several threads at once.
    """

    def __init__(self, timeout: float = REASSEMBLY_TIMEOUT_SECONDS, clock: Callable[[], float] = time.monotonic):
        self.timeout = timeout
        self.clock = clock
        self._entries: Dict[Tuple[str, str], _Partial] = {}
        self._lock = threading.Lock()
        self.dropped: List[Tuple[str, str]] = []

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def offer(self, e: Envelope) -> Optional[bytes]:
        """Returns the full logical payload when `e` completes its message."""
        key = (e.sender_id, e.message_id)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                entry = _Partial(expected=e.batch_count, flags=e.flags, first_seen=self.clock())
                self._entries[key] = entry
            elif entry.expected != e.batch_count or entry.flags != e.flags:
                raise IntegrityError(f"batch {e.batch_index} of {e.message_id} disagrees with its siblings")

            seen = entry.chunks.get(e.batch_index)
            if seen is not None:
                if seen != e.body:
                    raise IntegrityError(f"conflicting duplicate of batch {e.batch_index} in {e.message_id}")
                return None
            entry.chunks[e.batch_index] = e.body

            if len(entry.chunks) < entry.expected:
                return None
            del self._entries[key]

        data = b"".join(entry.chunks[i] for i in range(entry.expected))
        if COMPRESSED in entry.flags:
            data = decompress(data)
        return data

    def evict_stale(self, now: Optional[float] = None) -> List[Tuple[str, str]]:
        now = self.clock() if now is None else now
        with self._lock:
            stale = [k for k, v in self._entries.items() if now - v.first_seen > self.timeout]
            for k in stale:
                entry = self._entries.pop(k)
                logging.warning(
                    f"Dropping incomplete message {k[1]} from {k[0]}: "
                    f"{len(entry.chunks)}/{entry.expected} batches after {self.timeout:.0f}s"
                )
        self.dropped.extend(stale)
        return stale


class DedupWindow:
    """Remembers the last `size` message ids per sender."""

    def __init__(self, size: int = DEDUP_WINDOW):
        self.size = size
        self._seen: Dict[str, Tuple[Deque[str], Set[str]]] = {}
        self._lock = threading.Lock()

    def seen(self, sender: str, message_id: str) -> bool:
        with self._lock:
            entry = self._seen.get(sender)
            return entry is not None and message_id in entry[1]

    def add(self, sender: str, message_id: str) -> bool:
        """Returns False if the id was already recorded."""
        with self._lock:
            order, ids = self._seen.setdefault(sender, (deque(), set()))
            if message_id in ids:
                return False
            order.append(message_id)
            ids.add(message_id)
            while len(order) > self.size:
                ids.discard(order.popleft())
            return True


# ----------------------------------------
# ENDPOINT
# ----------------------------------------
@dataclass
class FunctionBinding:
    function_name: str
    topic: str
    handler: FunctionHandler
    subscription_id: int
    calls: int = 0


class ThroughputMeter:
    """Bytes moved over the span between the first and last recorded transfer."""

    def __init__(self, clock: Callable[[], float] = time.monotonic, window: int = 256):
        self.clock = clock
        self._samples: Deque[Tuple[float, int]] = deque(maxlen=window)
        self._lock = threading.Lock()

    def record(self, nbytes: int) -> None:
        with self._lock:
            self._samples.append((self.clock(), nbytes))

    def bytes_per_second(self) -> Optional[float]:
        with self._lock:
            if len(self._samples) < 2:
                return None
            span = self._samples[-1][0] - self._samples[0][0]
            total = sum(n for _, n in self._samples)
        if span <= 0:
            return None
        return total / span


class FleetEndpoint:
    """
    One participant on the fabric. Functions are bound under `base_topic`
    (or an explicit topic filter) and remote functions are called by
    publishing to `<target_base_topic>/<name>`.
    """

    def __init__(
        self,
        endpoint_id: str,
        broker: Broker,
        base_topic: str,
        *,
        chunk_limit: int = CHUNK_LIMIT_BYTES,
        max_payload: int = MAX_PAYLOAD_BYTES,
        compress_threshold: Optional[int] = COMPRESS_THRESHOLD_BYTES,
        reassembly_timeout: float = REASSEMBLY_TIMEOUT_SECONDS,
        dedup_window: int = DEDUP_WINDOW,
        clock: Callable[[], float] = time.monotonic,
    ):
        if SEPARATOR in endpoint_id or "\n" in endpoint_id:
            raise BindingError(f"endpoint id must not contain '|': {endpoint_id!r}")
        if chunk_limit <= 0:
            raise PayloadSizeError("chunk_limit must be at least 1 byte")
        self.endpoint_id = endpoint_id
        self.broker = broker
        self.base_topic = validate_topic(base_topic)
        self.chunk_limit = chunk_limit
        self.max_payload = max_payload
        self.compress_threshold = compress_threshold

        self.buffer = ReassemblyBuffer(reassembly_timeout, clock)
        self.dedup = DedupWindow(dedup_window)
        self.meter = ThroughputMeter(clock)

        self._bindings: Dict[str, FunctionBinding] = {}
        self._lock = threading.RLock()

    # ----------------------------------------
    # BINDINGS
    # ----------------------------------------
    def function_topic(self, name: str) -> str:
        return f"{self.base_topic}/{name}"

    def bind_function(self, name: str, handler: FunctionHandler, *, topic: Optional[str] = None) -> FunctionBinding:
        if not name or SEPARATOR in name or "/" in name:
            raise BindingError(f"invalid function name: {name!r}")
        topic = validate_filter(topic or self.function_topic(name))

        with self._lock:
            if topic in self._bindings:
                raise BindingError(f"{self.endpoint_id}: '{name}' is already bound on {topic}")
            binding = FunctionBinding(name, topic, handler, subscription_id=-1)
            self._bindings[topic] = binding

        try:
            binding.subscription_id = self.broker.subscribe(topic, self._make_receiver(binding), self.endpoint_id)
        except Exception:
            with self._lock:
                self._bindings.pop(topic, None)
            raise
        return binding

    def unbind_function(self, name: str, *, topic: Optional[str] = None) -> bool:
        topic = topic or self.function_topic(name)
        with self._lock:
            binding = self._bindings.pop(topic, None)
        if binding is None:
            return False
        self.broker.unsubscribe(binding.subscription_id)
        return True

    def bound_topics(self) -> List[str]:
        with self._lock:
            return sorted(self._bindings)

    def _make_receiver(self, binding: FunctionBinding) -> Callable[[str, bytes], None]:
        def receive(topic: str, raw: bytes) -> None:
            self.meter.record(len(raw))
            try:
                e = decode_envelope(raw)
            except EnvelopeParseError as err:
                logging.warning(f"{self.endpoint_id}: dropping malformed envelope on {topic}: {err}")
                return
            if e.function_name != binding.function_name:
                logging.warning(
                    f"{self.endpoint_id}: envelope for '{e.function_name}' arrived on {topic}; dropped"
                )
                return
            if self.dedup.seen(e.sender_id, e.message_id):
                return

            try:
                payload = self.buffer.offer(e)
            except IntegrityError as err:
                logging.error(f"{self.endpoint_id}: {err}")
                return
            finally:
                self.buffer.evict_stale()

            if payload is None or not self.dedup.add(e.sender_id, e.message_id):
                return

            with self._lock:
                if self._bindings.get(binding.topic) is not binding:
                    return
                binding.calls += 1
            binding.handler(e.sender_id, payload)

        return receive

    # ----------------------------------------
    # CALLS
    # ----------------------------------------
    def call_remote(self, target_base_topic: str, name: str, args: bytes = b"") -> str:
        args = bytes(args)
        if len(args) > self.max_payload:
            raise PayloadSizeError(f"payload of {len(args)} bytes exceeds the {self.max_payload}-byte cap")

        topic = validate_topic(f"{target_base_topic}/{name}")
        batches = split_batches(
            args,
            self.chunk_limit,
            sender_id=self.endpoint_id,
            function_name=name,
            compress_threshold=self.compress_threshold,
        )
        for e in batches:
            wire = encode_envelope(e)
            self.broker.publish(topic, wire)
            self.meter.record(len(wire))
        return batches[0].message_id

    def call_json(self, target_base_topic: str, name: str, body: BaseModel) -> str:
        return self.call_remote(target_base_topic, name, body.model_dump_json().encode("utf-8"))

    def close(self) -> None:
        with self._lock:
            bindings = list(self._bindings.values())
            self._bindings.clear()
        for b in bindings:
            try:
                self.broker.unsubscribe(b.subscription_id)
            except TransportError:
                pass


def wire_sizes(
    payload: bytes,
    chunk_limit: int = CHUNK_LIMIT_BYTES,
    *,
    sender_id: str = "client",
    function_name: str = "submit_update",
    compress_threshold: Optional[int] = COMPRESS_THRESHOLD_BYTES,
) -> List[int]:
    """Encoded size of every batch a call with `payload` would publish."""
    return [
        len(encode_envelope(e))
        for e in split_batches(
            payload,
            chunk_limit,
            sender_id=sender_id,
            function_name=function_name,
            compress_threshold=compress_threshold,
        )
    ]
