"""
Global model repository.

Listens on every session's public global topic, stores each root result
once per (session, round) and rebroadcasts it on the session topic so all
members can apply it. Optionally appends every record to a file:

    u16 session id length, UTF-8 session id, u32 round, u64 blob length, blob
"""
from __future__ import annotations

import logging
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Set, Tuple

from app import topics
from app.config import PARAM_RETENTION_ROUNDS, PARAM_STORE_PATH
from app.errors import ModelCoreError, ProtocolError, TransportError
from app.fleet_control import FleetEndpoint
from app.model_core import ModelParameters, deserialize_params, serialize_params
from app.schemas import UpdateMeta, pack_update, unpack_update

SERVER_ID = "paramserver"
_HEADER = struct.Struct("<H")
_TRAILER = struct.Struct("<IQ")


@dataclass(frozen=True)
class GlobalRecord:
    session_id: str
    round: int
    params: ModelParameters
    weight: float
    received_at: float


def _encode_record(session_id: str, round_no: int, blob: bytes) -> bytes:
    sid = session_id.encode("utf-8")
    return _HEADER.pack(len(sid)) + sid + _TRAILER.pack(round_no, len(blob)) + blob


def read_store(path: Path | str) -> Iterator[Tuple[str, int, ModelParameters]]:
    """Yield (session_id, round, params) for every record in an append-only store file."""
    with open(path, "rb") as f:
        while True:
            head = f.read(_HEADER.size)
            if not head:
                return
            if len(head) < _HEADER.size:
                raise ProtocolError(f"{path}: truncated record header")
            (sid_len,) = _HEADER.unpack(head)
            sid = f.read(sid_len)
            trailer = f.read(_TRAILER.size)
            if len(sid) < sid_len or len(trailer) < _TRAILER.size:
                raise ProtocolError(f"{path}: truncated record header")
            round_no, blob_len = _TRAILER.unpack(trailer)
            blob = f.read(blob_len)
            if len(blob) < blob_len:
                raise ProtocolError(f"{path}: truncated record blob")
            yield sid.decode("utf-8"), round_no, deserialize_params(blob)


class ParamServer:
    def __init__(
        self,
        fleet: FleetEndpoint,
        *,
        retention: int = PARAM_RETENTION_ROUNDS,
        store_path: Optional[Path] = PARAM_STORE_PATH,
        clock=time.time,
    ):
        if retention < 1:
            raise ValueError("retention must keep at least one round")
        self.fleet = fleet
        self.retention = retention
        self.store_path = Path(store_path) if store_path else None
        self.clock = clock

        self._records: Dict[str, "OrderedDict[int, GlobalRecord]"] = {}
        self._latest: Dict[str, int] = {}
        # every round ever accepted, including those evicted from _records
        self._accepted: Dict[str, Set[int]] = {}
        self._locks: Dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self.broadcasts = 0

    def bind(self) -> "ParamServer":
        self.fleet.bind_function("root_result", self._on_message, topic=topics.GLOBAL_FILTER)
        logging.info(f"📦 Parameter server listening on {topics.GLOBAL_FILTER}")
        return self

    def _session_lock(self, session_id: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def _on_message(self, sender: str, payload: bytes) -> None:
        try:
            meta, blob = unpack_update(payload)
            params = deserialize_params(blob)
        except (ProtocolError, ModelCoreError) as e:
            logging.warning(f"dropping root result from {sender}: {e}")
            return
        try:
            self.on_root_result(meta.session_id, meta.round, params, weight=meta.weight)
        except ProtocolError as e:
            logging.error(f"root result from {sender}: {e}")

    def on_root_result(self, session_id: str, round_no: int, params: ModelParameters, *, weight: float = 1.0) -> bool:
        """Store and rebroadcast; returns False for an ignored duplicate."""
        with self._session_lock(session_id):
            latest = self._latest.get(session_id, 0)
            accepted = self._accepted.setdefault(session_id, set())
            if round_no in accepted:
                logging.warning(f"{session_id}: duplicate global model for round {round_no} ignored")
                return False
            if round_no < latest:
                raise ProtocolError(f"{session_id}: round {round_no} arrived after round {latest}")

            record = GlobalRecord(session_id, round_no, params, weight, self.clock())
            rounds = self._records.setdefault(session_id, OrderedDict())
            rounds[round_no] = record
            while len(rounds) > self.retention:
                rounds.popitem(last=False)
            self._latest[session_id] = round_no
            accepted.add(round_no)

            blob = serialize_params(params)
            if self.store_path is not None:
                self.store_path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.store_path, "ab") as f:
                    f.write(_encode_record(session_id, round_no, blob))

            meta = UpdateMeta(session_id=session_id, round=round_no, sender=SERVER_ID, weight=weight)
            try:
                self.fleet.call_remote(topics.session_topic(session_id), "global_update", pack_update(meta, blob))
                self.broadcasts += 1
            except TransportError as e:
                logging.error(f"{session_id}: global update broadcast failed: {e}")
            logging.info(f"💾 {session_id}: stored global model for round {round_no} (weight {weight:g})")
            return True

    def get_record(self, session_id: str, round_no: Optional[int] = None) -> Optional[GlobalRecord]:
        rounds = self._records.get(session_id)
        if not rounds:
            return None
        if round_no is None:
            round_no = self._latest[session_id]
        record = rounds.get(round_no)
        if record is None:
            record = self._from_store(session_id, round_no)
        return record

    def get_global(self, session_id: str, round_no: Optional[int] = None) -> Optional[ModelParameters]:
        record = self.get_record(session_id, round_no)
        return record.params if record is not None else None

    def _from_store(self, session_id: str, round_no: int) -> Optional[GlobalRecord]:
        if self.store_path is None or not self.store_path.exists():
            return None
        for sid, r, params in read_store(self.store_path):
            if sid == session_id and r == round_no:
                # Weight and arrival time are not persisted.
                return GlobalRecord(sid, r, params, 0.0, 0.0)
        return None

    def sessions(self) -> List[str]:
        return sorted(self._records)

    def rounds(self, session_id: str) -> List[int]:
        return list(self._records.get(session_id, {}))
