"""
Client side of a session.

    client = SDFLClient("c1", broker)
    client.join_fl_session("s1", model_name="mnist-logreg", preferred_role="trainer")
    client.set_model("s1", params)
    for _ in range(rounds):
        client.wait_round_start("s1")
        client.train_round("s1", shard, epochs=5, learning_rate=0.1)   # set_model + send_local
        params = client.wait_global_update("s1")

Role behaviour (trainer, aggregator, trainer-aggregator) follows whatever
the coordinator last assigned; message handling runs on broker threads and
never blocks on the training loop.
"""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

from pydantic import BaseModel

from app import topics
from app.clustering import Role, normalize_role
from app.config import CLIENT_REQUEST_TIMEOUT_SECONDS, STRAGGLER_TIMEOUT_SECONDS
from app.errors import (
    ClientStateError,
    ConnectivityError,
    ModelCoreError,
    ProtocolError,
    RoundTimeoutError,
    SchemaError,
    SessionRejected,
    SessionTerminated,
    TransportError,
)
from app.fleet_control import FleetEndpoint
from app.model_core import (
    Dataset,
    ModelParameters,
    Schema,
    TrainResult,
    WeightedUpdate,
    deserialize_params,
    evaluate,
    fedavg_weighted,
    serialize_params,
    train_local,
)
from app.schemas import (
    ClientReadyMsg,
    ClientStats,
    CreateSessionRequest,
    DeregisterRequest,
    JoinSessionRequest,
    RoleAck,
    RoleAssignmentMsg,
    RoundStartMsg,
    SessionNotice,
    SessionReply,
    TopologyMsg,
    UpdateMeta,
    pack_update,
    parse_body,
    unpack_update,
)
from app.stats import collect_stats
from app.transport import Broker


class Provenance(str, Enum):
    LOCAL = "local"
    GLOBAL = "global"


# ----------------------------------------
# MODEL CONTROLLER
# ----------------------------------------
@dataclass
class ModelEntry:
    params: Optional[ModelParameters] = None
    round: int = 0
    provenance: Provenance = Provenance.LOCAL
    n_samples: int = 1
    schema: Optional[Schema] = None
    last_loss: Optional[float] = None
    last_accuracy: Optional[float] = None
    notice: Optional[SessionNotice] = None

    @property
    def closed(self) -> bool:
        return self.notice is not None


class ModelController:
    """Per-session model repository of one client."""

    def __init__(self):
        self._entries: Dict[str, ModelEntry] = {}
        self._lock = threading.RLock()

    def open(self, session_id: str) -> ModelEntry:
        with self._lock:
            return self._entries.setdefault(session_id, ModelEntry())

    def drop(self, session_id: str) -> None:
        with self._lock:
            self._entries.pop(session_id, None)

    def entry(self, session_id: str) -> ModelEntry:
        with self._lock:
            e = self._entries.get(session_id)
            if e is None:
                raise ClientStateError(f"not a member of session '{session_id}'")
            return e

    def __contains__(self, session_id: str) -> bool:
        with self._lock:
            return session_id in self._entries

    def set_local(self, session_id: str, params: ModelParameters, n_samples: Optional[int] = None) -> None:
        with self._lock:
            e = self.entry(session_id)
            if e.closed:
                raise ClientStateError(f"session '{session_id}' is {e.notice.status}")
            if e.schema is not None and params.schema != e.schema:
                raise SchemaError(f"model schema {params.schema} differs from session schema {e.schema}")
            e.params = params
            e.provenance = Provenance.LOCAL
            if n_samples is not None:
                if n_samples < 1:
                    raise ValueError("n_samples must be positive")
                e.n_samples = n_samples

    def apply_global(self, session_id: str, params: ModelParameters, round_no: int) -> None:
        with self._lock:
            e = self.entry(session_id)
            e.params = params
            e.round = round_no
            e.provenance = Provenance.GLOBAL
            if e.schema is None:
                e.schema = params.schema


# ----------------------------------------
# ROLES AND AGGREGATION
# ----------------------------------------
@dataclass(frozen=True)
class RoleAssignment:
    session_id: str
    role: Role
    parent_topic: str
    inbox_topic: Optional[str]
    expected_input_count: int
    children: Tuple[str, ...]
    topology_version: int
    round: int
    aggregation_timeout: float

    @classmethod
    def from_message(cls, msg: RoleAssignmentMsg, default_timeout: float) -> "RoleAssignment":
        role = normalize_role(msg.role)
        if role.is_head and msg.expected_input_count < 1 and msg.children:
            raise ProtocolError(f"head assignment with children but no expected inputs: {msg}")
        return cls(
            session_id=msg.session_id,
            role=role,
            parent_topic=msg.parent_topic,
            inbox_topic=msg.inbox_topic,
            expected_input_count=msg.expected_input_count,
            children=tuple(sorted(msg.children)),
            topology_version=msg.topology_version,
            round=msg.round,
            aggregation_timeout=msg.aggregation_timeout or default_timeout,
        )

    @property
    def is_root(self) -> bool:
        return self.parent_topic == topics.global_topic(self.session_id)

    def same_duty(self, other: "RoleAssignment") -> bool:
        return (self.role, self.parent_topic, self.inbox_topic, self.expected_input_count, self.children) == (
            other.role,
            other.parent_topic,
            other.inbox_topic,
            other.expected_input_count,
            other.children,
        )


@dataclass
class AggregationState:
    session_id: str
    round: int
    expected: int
    allowed: frozenset
    received: Dict[str, WeightedUpdate] = field(default_factory=dict)
    opened: bool = False
    fired: bool = False
    timer: Optional[threading.Timer] = None

    def missing(self) -> List[str]:
        return sorted(self.allowed - set(self.received))

    @property
    def complete(self) -> bool:
        return self.opened and len(self.received) >= self.expected


@dataclass(frozen=True)
class AggregationRecord:
    session_id: str
    round: int
    inputs: int
    weight: float
    elapsed_ms: float


# ----------------------------------------
# CLIENT
# ----------------------------------------
class SDFLClient:
    def __init__(
        self,
        client_id: str,
        broker: Broker,
        *,
        request_timeout: float = CLIENT_REQUEST_TIMEOUT_SECONDS,
        aggregation_timeout: float = STRAGGLER_TIMEOUT_SECONDS,
        stats_override: Optional[ClientStats] = None,
        clock: Callable[[], float] = time.monotonic,
        **fleet_options,
    ):
        self.client_id = client_id
        self.request_timeout = request_timeout
        self.default_aggregation_timeout = aggregation_timeout
        self.stats_override = stats_override
        self.clock = clock

        self.fleet = FleetEndpoint(client_id, broker, topics.client_topic(client_id), clock=clock, **fleet_options)
        self.models = ModelController()

        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._replies: Dict[Tuple[str, str], SessionReply] = {}
        self._roles: Dict[str, RoleAssignment] = {}
        self._agg: Dict[str, AggregationState] = {}
        self._started_round: Dict[str, int] = {}
        self._globals: Dict[str, Tuple[int, ModelParameters]] = {}
        self._ready_sent: Dict[str, int] = {}
        self._missing: Dict[Tuple[str, int], List[str]] = {}
        self._session_topics: Dict[str, List[Tuple[str, str]]] = {}
        self.topologies: Dict[str, TopologyMsg] = {}
        self.aggregations: List[AggregationRecord] = []
        self.upward_publications = 0

        self.fleet.bind_function("session_reply", self._on_session_reply)
        self.fleet.bind_function("assign_role", self._on_assign_role)
        self.fleet.bind_function("global_update_notice", self._on_notice)
        self.fleet.bind_function("aggregate_now", self._on_aggregate_now)

    # ----------------------------------------
    # SESSION API
    # ----------------------------------------
    def create_fl_session(
        self,
        session_id: str,
        *,
        model_name: str,
        session_time: float = 3600.0,
        waiting_time: float = 120.0,
        capacity_min: int = 1,
        capacity_max: int = 1,
        fl_rounds: int = 1,
        preferred_role: str = "trainer",
    ) -> SessionReply:
        req = CreateSessionRequest(
            client_id=self.client_id,
            session_id=session_id,
            model_name=model_name,
            session_time=session_time,
            waiting_time=waiting_time,
            capacity_min=capacity_min,
            capacity_max=capacity_max,
            fl_rounds=fl_rounds,
            preferred_role=preferred_role,
        )
        return self._request("create", "create_fl_session", session_id, req)

    def join_fl_session(
        self, session_id: str, *, model_name: str, fl_rounds: int = 1, preferred_role: str = "trainer"
    ) -> SessionReply:
        req = JoinSessionRequest(
            client_id=self.client_id,
            session_id=session_id,
            model_name=model_name,
            fl_rounds=fl_rounds,
            preferred_role=preferred_role,
        )
        return self._request("join", "join_fl_session", session_id, req)

    def _request(self, kind: str, fn: str, session_id: str, body: BaseModel) -> SessionReply:
        key = (kind, session_id)
        with self._lock:
            self._replies.pop(key, None)
            fresh = session_id not in self.models
            self.models.open(session_id)
        self._bind_session_topics(session_id)

        try:
            self.fleet.call_json(topics.COORD_TOPIC, fn, body)
        except TransportError as e:
            if fresh:
                self._forget_session(session_id)
            raise ConnectivityError(f"{self.client_id}: cannot reach the coordinator: {e}") from e

        deadline = time.monotonic() + self.request_timeout
        with self._cond:
            while key not in self._replies:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cond.wait(remaining)
            reply = self._replies.pop(key, None)

        if reply is None:
            if fresh:
                self._forget_session(session_id)
            raise ConnectivityError(f"{self.client_id}: no reply to {fn} for '{session_id}' within {self.request_timeout}s")
        if not reply.accepted:
            if fresh:
                self._forget_session(session_id)
            raise SessionRejected(reply.reason or "rejected", f"{fn} '{session_id}' rejected: {reply.reason}")
        logging.info(f"{self.client_id}: ✅ {kind} '{session_id}' accepted ({reply.state})")
        return reply

    def _bind_session_topics(self, session_id: str) -> None:
        handlers = {
            "round_start": self._on_round_start,
            "global_update": self._on_global_update,
            "topology": self._on_topology,
        }
        base = topics.session_topic(session_id)
        with self._lock:
            if session_id in self._session_topics:
                return
            bound = [(fn, f"{base}/{fn}") for fn in handlers]
            self._session_topics[session_id] = bound
        for fn, topic in bound:
            self.fleet.bind_function(fn, handlers[fn], topic=topic)

    def _forget_session(self, session_id: str, drop_entry: bool = True) -> None:
        # Unbinding waits for running handlers, and those take self._lock.
        with self._lock:
            bound = list(self._session_topics.pop(session_id, []))
            role = self._roles.pop(session_id, None)
            if role is not None and role.inbox_topic:
                bound.append(("submit_update", f"{role.inbox_topic}/submit_update"))
            self._drop_aggregation(session_id)
            if drop_entry:
                self.models.drop(session_id)
        for fn, topic in bound:
            self.fleet.unbind_function(fn, topic=topic)

    def leave_session(self, session_id: str) -> None:
        self.models.entry(session_id)
        try:
            self.fleet.call_json(
                topics.COORD_TOPIC, "deregister", DeregisterRequest(session_id=session_id, client_id=self.client_id)
            )
        except TransportError as e:
            logging.warning(f"{self.client_id}: deregister from '{session_id}' not delivered: {e}")
        self._forget_session(session_id)
        logging.info(f"{self.client_id}: left '{session_id}'")

    # ----------------------------------------
    # MODEL API
    # ----------------------------------------
    def set_model(self, session_id: str, params: ModelParameters, n_samples: Optional[int] = None) -> None:
        self.models.set_local(session_id, params, n_samples)

    def get_model(self, session_id: str) -> Optional[ModelParameters]:
        return self.models.entry(session_id).params

    def role(self, session_id: str) -> Optional[RoleAssignment]:
        with self._lock:
            return self._roles.get(session_id)

    def current_round(self, session_id: str) -> int:
        with self._lock:
            return self._started_round.get(session_id, 0)

    def train_round(
        self, session_id: str, dataset: Dataset, *, epochs: int, learning_rate: float, seed: int = 0, batch_size: int = 32
    ) -> Optional[TrainResult]:
        """Train the current model on `dataset` and send it upward. Pure aggregators skip training."""
        role = self.role(session_id)
        if role is None:
            raise ClientStateError(f"{self.client_id}: no role in '{session_id}' yet")
        if not role.role.trains:
            self.send_local(session_id)
            return None
        entry = self.models.entry(session_id)
        if entry.params is None:
            raise ClientStateError(f"{self.client_id}: no model set for '{session_id}'")
        result = train_local(entry.params, dataset, epochs, learning_rate, seed, batch_size=batch_size)
        entry.last_loss = result.loss
        entry.last_accuracy = evaluate(result.params, dataset)
        self.set_model(session_id, result.params, result.n_samples)
        self.send_local(session_id)
        return result

    def send_local(self, session_id: str) -> None:
        with self._lock:
            role = self._roles.get(session_id)
            if role is None:
                raise ClientStateError(f"{self.client_id}: no role in '{session_id}' yet")
            entry = self.models.entry(session_id)
            if entry.closed:
                raise ClientStateError(f"session '{session_id}' is {entry.notice.status}")
            if entry.params is None:
                raise ClientStateError(f"{self.client_id}: no model set for '{session_id}'")
            round_no = self._started_round.get(session_id, role.round)

            if role.role is Role.AGGREGATOR:
                logging.info(f"{self.client_id}: aggregator of '{session_id}' does not train; nothing to send")
                return
            update = WeightedUpdate(entry.params, float(entry.n_samples))
            if role.role is Role.TRAINER_AGGREGATOR:
                state = self._agg_state(session_id, round_no)
                if state is not None:
                    self._add_input(state, self.client_id, update, own=True)
                return

        self._publish_up(role, round_no, update)

    # ----------------------------------------
    # ROUND RENDEZVOUS
    # ----------------------------------------
    def wait_round_start(self, session_id: str, timeout: Optional[float] = None) -> int:
        """Block until a round newer than the last applied global model has started; returns its number."""
        timeout = self.default_aggregation_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                entry = self.models.entry(session_id)
                started = self._started_round.get(session_id, 0)
                if started > entry.round and session_id in self._roles:
                    return started
                if entry.closed:
                    raise SessionTerminated(f"session '{session_id}' {entry.notice.status}: {entry.notice.reason}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise RoundTimeoutError(f"{self.client_id}: no round start for '{session_id}' within {timeout}s")
                self._cond.wait(remaining)

    def wait_global_update(self, session_id: str, timeout: Optional[float] = None) -> ModelParameters:
        timeout = self.default_aggregation_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                entry = self.models.entry(session_id)
                want = max(self._started_round.get(session_id, 0), entry.round, 1)
                have = self._globals.get(session_id)
                if have is not None and have[0] >= want:
                    round_no, params = have
                    break
                if entry.closed:
                    raise SessionTerminated(f"session '{session_id}' {entry.notice.status}: {entry.notice.reason}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise RoundTimeoutError(f"{self.client_id}: no global model for '{session_id}' within {timeout}s")
                self._cond.wait(remaining)

            self.models.apply_global(session_id, params, round_no)
            send_ready = self._ready_sent.get(session_id, 0) < round_no
            if send_ready:
                self._ready_sent[session_id] = round_no
            missing = self._missing.pop((session_id, round_no), [])

        if send_ready:
            self._report_ready(session_id, round_no, missing)
        return params

    def collect_stats(self, session_id: Optional[str] = None) -> ClientStats:
        loss = acc = None
        if session_id is not None and session_id in self.models:
            e = self.models.entry(session_id)
            loss, acc = e.last_loss, e.last_accuracy
        return collect_stats(
            self.client_id, self.fleet.meter, override=self.stats_override, last_loss=loss, last_accuracy=acc
        )

    def _report_ready(self, session_id: str, round_no: int, missing: List[str]) -> None:
        msg = ClientReadyMsg(
            session_id=session_id,
            client_id=self.client_id,
            round=round_no,
            stats=self.collect_stats(session_id),
            missing_children=missing,
        )
        try:
            self.fleet.call_json(topics.COORD_TOPIC, "client_ready", msg)
        except TransportError as e:
            logging.warning(f"{self.client_id}: readiness for '{session_id}' not delivered: {e}")

    # ----------------------------------------
    # ROLE ARBITER
    # ----------------------------------------
    def on_role_assignment(self, msg: RoleAssignmentMsg) -> RoleAssignment:
        if msg.client_id != self.client_id:
            raise ProtocolError(f"assignment for {msg.client_id} delivered to {self.client_id}")
        new = RoleAssignment.from_message(msg, self.default_aggregation_timeout)

        stale_inbox = fresh_inbox = None
        with self._lock:
            if msg.session_id not in self.models:
                raise ProtocolError(f"assignment for unknown session '{msg.session_id}'")
            old = self._roles.get(msg.session_id)
            if old is None or not old.same_duty(new):
                if old is not None and old.inbox_topic and old.inbox_topic != new.inbox_topic:
                    stale_inbox = old.inbox_topic
                if new.inbox_topic and (old is None or old.inbox_topic != new.inbox_topic):
                    fresh_inbox = new.inbox_topic
                self._drop_aggregation(msg.session_id)
                logging.info(
                    f"{self.client_id}: 🎭 role in '{msg.session_id}' = {new.role.value}"
                    f" (expects {new.expected_input_count}, v{new.topology_version})"
                )
            self._roles[msg.session_id] = new
            self._cond.notify_all()

        # Outside the lock: unbinding waits for an inbox handler that may be blocked on it.
        if stale_inbox:
            self.fleet.unbind_function("submit_update", topic=f"{stale_inbox}/submit_update")
        if fresh_inbox:
            self.fleet.bind_function(
                "submit_update", self._make_inbox_handler(msg.session_id), topic=f"{fresh_inbox}/submit_update"
            )

        try:
            self.fleet.call_json(
                topics.COORD_TOPIC,
                "role_ack",
                RoleAck(session_id=msg.session_id, client_id=self.client_id, topology_version=new.topology_version),
            )
        except TransportError as e:
            logging.warning(f"{self.client_id}: role ack not delivered: {e}")
        return new

    def _agg_state(self, session_id: str, round_no: int) -> Optional[AggregationState]:
        role = self._roles.get(session_id)
        if role is None or not role.role.is_head:
            return None
        state = self._agg.get(session_id)
        if state is not None and state.round == round_no:
            return state
        if state is not None and state.round > round_no:
            return None
        if state is not None and state.timer is not None:
            state.timer.cancel()
        allowed = set(role.children)
        if role.role.trains:
            allowed.add(self.client_id)
        state = AggregationState(session_id, round_no, role.expected_input_count, frozenset(allowed))
        self._agg[session_id] = state
        return state

    def _drop_aggregation(self, session_id: str) -> None:
        state = self._agg.pop(session_id, None)
        if state is not None and state.timer is not None:
            state.timer.cancel()

    def _open_window(self, state: AggregationState) -> None:
        if state.opened:
            return
        state.opened = True
        if state.complete:
            self._fire(state)

    def on_aggregation_input(
        self, session_id: str, sender: str, update: WeightedUpdate, round_no: Optional[int] = None
    ) -> bool:
        """Buffer a child's update; returns True when it was accepted."""
        with self._lock:
            if round_no is None:
                round_no = self._started_round.get(session_id, 1)
            state = self._agg_state(session_id, round_no)
            if state is None:
                logging.warning(f"{self.client_id}: not aggregating '{session_id}' round {round_no}; dropped input from {sender}")
                return False
            return self._add_input(state, sender, update)

    def _add_input(self, state: AggregationState, sender: str, update: WeightedUpdate, own: bool = False) -> bool:
        if sender not in state.allowed:
            logging.warning(f"{self.client_id}: rejected update from non-child {sender} in '{state.session_id}'")
            return False
        if state.fired:
            logging.warning(f"{self.client_id}: late update from {sender} for round {state.round} dropped")
            return False
        if sender in state.received:
            logging.warning(f"{self.client_id}: duplicate update from {sender} replaces the earlier one")
        state.received[sender] = update
        if own:
            self._open_window(state)
        elif state.complete:
            self._fire(state)
        return True

    def _fire(self, state: AggregationState) -> None:
        if state.fired:
            return
        state.fired = True
        if state.timer is not None:
            state.timer.cancel()

        role = self._roles.get(state.session_id)
        missing = state.missing()
        if missing:
            self._missing[(state.session_id, state.round)] = missing
            logging.warning(f"{self.client_id}: aggregating round {state.round} without {missing}")

        started = time.perf_counter()
        if state.received:
            result = fedavg_weighted([state.received[k] for k in sorted(state.received)])
        else:
            entry = self.models.entry(state.session_id)
            if state.expected > 0 or entry.params is None:
                logging.error(f"{self.client_id}: nothing to aggregate for round {state.round}")
                return
            result = WeightedUpdate(entry.params, 1.0)
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        self.aggregations.append(
            AggregationRecord(state.session_id, state.round, len(state.received), result.weight, elapsed_ms)
        )
        self._publish_up(role, state.round, result)

    def _publish_up(self, role: RoleAssignment, round_no: int, update: WeightedUpdate) -> None:
        meta = UpdateMeta(session_id=role.session_id, round=round_no, sender=self.client_id, weight=update.weight)
        body = pack_update(meta, serialize_params(update.params))
        fn = "root_result" if role.is_root else "submit_update"
        self.fleet.call_remote(role.parent_topic, fn, body)
        self.upward_publications += 1
        logging.debug(f"{self.client_id}: ⬆️ round {round_no} update (weight {update.weight:g}) -> {role.parent_topic}")

    def _on_deadline(self, session_id: str, round_no: int) -> None:
        with self._lock:
            state = self._agg.get(session_id)
            if state is None or state.round != round_no or state.fired:
                return
            logging.warning(f"{self.client_id}: aggregation deadline for '{session_id}' round {round_no}")
            self._fire(state)

    # ----------------------------------------
    # HANDLERS
    # ----------------------------------------
    def _on_session_reply(self, sender: str, payload: bytes) -> None:
        try:
            reply = parse_body(SessionReply, payload)
        except ProtocolError as e:
            logging.warning(f"{self.client_id}: {e}")
            return
        with self._cond:
            self._replies[(reply.request, reply.session_id)] = reply
            self._cond.notify_all()

    def _on_assign_role(self, sender: str, payload: bytes) -> None:
        try:
            self.on_role_assignment(parse_body(RoleAssignmentMsg, payload))
        except (ProtocolError, ValueError) as e:
            # No ack goes back; the coordinator flags this client at the ack deadline.
            logging.error(f"{self.client_id}: malformed role assignment: {e}")

    def _on_round_start(self, sender: str, payload: bytes) -> None:
        try:
            msg = parse_body(RoundStartMsg, payload)
        except ProtocolError as e:
            logging.warning(f"{self.client_id}: {e}")
            return
        with self._cond:
            if msg.session_id not in self.models or msg.round <= self._started_round.get(msg.session_id, 0):
                return
            self._started_round[msg.session_id] = msg.round
            state = self._agg_state(msg.session_id, msg.round)
            if state is not None:
                role = self._roles[msg.session_id]
                state.timer = threading.Timer(role.aggregation_timeout, self._on_deadline, (msg.session_id, msg.round))
                state.timer.daemon = True
                state.timer.start()
                if not role.role.trains:
                    self._open_window(state)
            self._cond.notify_all()

    def _on_aggregate_now(self, sender: str, payload: bytes) -> None:
        try:
            msg = parse_body(RoundStartMsg, payload)
        except ProtocolError as e:
            logging.warning(f"{self.client_id}: {e}")
            return
        self._on_deadline(msg.session_id, msg.round)

    def _make_inbox_handler(self, session_id: str) -> Callable[[str, bytes], None]:
        def on_update(sender: str, payload: bytes) -> None:
            try:
                meta, blob = unpack_update(payload)
                if meta.session_id != session_id or meta.sender != sender:
                    raise ProtocolError(f"update metadata {meta} does not match sender {sender}")
                update = WeightedUpdate(deserialize_params(blob), meta.weight)
            except (ProtocolError, ModelCoreError, ValueError) as e:
                logging.warning(f"{self.client_id}: dropping update from {sender}: {e}")
                return
            self.on_aggregation_input(session_id, sender, update, meta.round)

        return on_update

    def _on_global_update(self, sender: str, payload: bytes) -> None:
        try:
            meta, blob = unpack_update(payload)
            params = deserialize_params(blob)
        except (ProtocolError, ModelCoreError) as e:
            logging.warning(f"{self.client_id}: dropping global update from {sender}: {e}")
            return
        with self._cond:
            if meta.session_id not in self.models:
                return
            schema = self.models.entry(meta.session_id).schema
            if schema is not None and params.schema != schema:
                logging.error(f"{self.client_id}: global model for '{meta.session_id}' has a foreign schema; dropped")
                return
            have = self._globals.get(meta.session_id)
            if have is None or meta.round > have[0]:
                self._globals[meta.session_id] = (meta.round, params)
                state = self._agg.get(meta.session_id)
                if state is not None and state.round <= meta.round:
                    self._drop_aggregation(meta.session_id)
                self._cond.notify_all()

    def _on_topology(self, sender: str, payload: bytes) -> None:
        try:
            msg = parse_body(TopologyMsg, payload)
        except ProtocolError as e:
            logging.warning(f"{self.client_id}: {e}")
            return
        with self._lock:
            self.topologies[msg.session_id] = msg

    def _on_notice(self, sender: str, payload: bytes) -> None:
        try:
            notice = parse_body(SessionNotice, payload)
        except ProtocolError as e:
            logging.warning(f"{self.client_id}: {e}")
            return
        with self._cond:
            if notice.session_id not in self.models:
                return
            self.models.entry(notice.session_id).notice = notice
            self._drop_aggregation(notice.session_id)
            self._cond.notify_all()
        logging.info(f"{self.client_id}: session '{notice.session_id}' {notice.status} ({notice.reason})")

    def close(self) -> None:
        with self._lock:
            for sid in list(self._agg):
                self._drop_aggregation(sid)
        self.fleet.close()
