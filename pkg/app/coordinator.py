"""
Session coordinator.

Owns every session's lifecycle, clusters members into a topology, tells each
client its role over its private topic and drives rounds:

    WAITING --(capacity reached / waiting_time)--> CLUSTERING --> ACTIVE
    ACTIVE  --(all ready)--> next round ... --> TERMINATED
    WAITING --(waiting_time, too few members)--> ABORTED

All state mutations run under one lock, so inbound messages and ticks are
processed one at a time in arrival order.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Set

from pydantic import BaseModel

from app import topics
from app.clustering import (
    ClusteringPolicy,
    ClusterNode,
    ClusterTopology,
    OPTIMIZERS,
    Role,
    RoleDelta,
    build_clusters,
    normalize_role,
    optimize_roles,
    role_delta,
)
from app.config import (
    AGGREGATION_MARGIN_SECONDS,
    CLUSTERING_POLICY,
    OPTIMIZER_POLICY,
    STRAGGLER_TIMEOUT_SECONDS,
)
from app.errors import (
    ConfigurationError,
    CoordinatorError,
    ProtocolError,
    SessionRejected,
    TransportError,
)
from app.fleet_control import FleetEndpoint
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
    SessionSummary,
    parse_body,
)

SUSPECT_LIMIT = 2


class SessionState(str, Enum):
    CREATED = "created"
    WAITING = "waiting"
    CLUSTERING = "clustering"
    ACTIVE = "active"
    TERMINATED = "terminated"
    ABORTED = "aborted"

    @property
    def live(self) -> bool:
        return self not in (SessionState.TERMINATED, SessionState.ABORTED)


_TRANSITIONS = {
    SessionState.CREATED: {SessionState.WAITING},
    SessionState.WAITING: {SessionState.CLUSTERING, SessionState.ABORTED},
    SessionState.CLUSTERING: {SessionState.ACTIVE, SessionState.ABORTED},
    SessionState.ACTIVE: {SessionState.ACTIVE, SessionState.TERMINATED},
    SessionState.TERMINATED: set(),
    SessionState.ABORTED: set(),
}


@dataclass
class MemberInfo:
    preferred_role: Role
    stats: Optional[ClientStats] = None
    ready: bool = False
    suspect_count: int = 0


@dataclass
class SessionDescriptor:
    session_id: str
    model_name: str
    owner: str
    session_time: float
    waiting_time: float
    capacity_min: int
    capacity_max: int
    fl_rounds_max: int
    created_at: float
    round: int = 0
    state: SessionState = SessionState.CREATED
    members: Dict[str, MemberInfo] = field(default_factory=dict)
    topology: Optional[ClusterTopology] = None

    round_open: bool = False
    round_started_at: Optional[float] = None
    pending_acks: Set[str] = field(default_factory=set)
    acks_since: Optional[float] = None
    straggler_strikes: int = 0
    history: List[SessionState] = field(default_factory=list)

    def transition(self, new: SessionState) -> None:
        if new not in _TRANSITIONS[self.state]:
            raise CoordinatorError(f"{self.session_id}: illegal transition {self.state.value} -> {new.value}")
        if new is not self.state:
            logging.info(f"{self.session_id}: {self.state.value} -> {new.value}")
        self.state = new
        self.history.append(new)

    @property
    def waiting_deadline(self) -> float:
        return self.created_at + self.waiting_time

    @property
    def session_deadline(self) -> float:
        return self.created_at + self.session_time

    def round_complete(self) -> bool:
        return self.round_open and bool(self.members) and all(m.ready for m in self.members.values())

    def summary(self) -> SessionSummary:
        return SessionSummary(
            session_id=self.session_id,
            model_name=self.model_name,
            owner=self.owner,
            state=self.state.value,
            round=self.round,
            fl_rounds_max=self.fl_rounds_max,
            members=sorted(self.members),
            topology_version=self.topology.version if self.topology else 0,
        )


@dataclass(frozen=True)
class SessionEvent:
    session_id: str
    kind: str
    detail: str = ""


class Coordinator:
    def __init__(
        self,
        fleet: FleetEndpoint,
        *,
        clustering_policy: "ClusteringPolicy | str" = CLUSTERING_POLICY,
        optimizer_policy: str = OPTIMIZER_POLICY,
        straggler_timeout: float = STRAGGLER_TIMEOUT_SECONDS,
        aggregation_margin: float = AGGREGATION_MARGIN_SECONDS,
        clock: Callable[[], float] = time.monotonic,
    ):
        if optimizer_policy not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer policy '{optimizer_policy}'")
        self.fleet = fleet
        self.clustering_policy = ClusteringPolicy.parse(clustering_policy)
        self.optimizer_policy = optimizer_policy
        self.straggler_timeout = straggler_timeout
        self.aggregation_margin = aggregation_margin
        self.clock = clock

        self._sessions: Dict[str, SessionDescriptor] = {}
        self._lock = threading.RLock()
        self.sent_assignments = 0

    # ----------------------------------------
    # WIRING
    # ----------------------------------------
    def bind(self) -> "Coordinator":
        self.fleet.bind_function("create_fl_session", self._on_create)
        self.fleet.bind_function("join_fl_session", self._on_join)
        self.fleet.bind_function("client_ready", self._on_ready)
        self.fleet.bind_function("role_ack", self._on_role_ack)
        self.fleet.bind_function("deregister", self._on_deregister)
        logging.info(
            f"🧭 Coordinator listening on {self.fleet.base_topic} "
            f"(clustering={self.clustering_policy}, optimizer={self.optimizer_policy})"
        )
        return self

    def _send(self, client_id: str, fn: str, body: BaseModel) -> bool:
        try:
            self.fleet.call_json(topics.client_topic(client_id), fn, body)
            return True
        except TransportError as e:
            logging.warning(f"cannot reach {client_id} for {fn}: {e}")
            return False

    def _broadcast(self, session_id: str, fn: str, body: BaseModel) -> None:
        try:
            self.fleet.call_json(topics.session_topic(session_id), fn, body)
        except TransportError as e:
            logging.warning(f"{session_id}: broadcast of {fn} failed: {e}")

    # ----------------------------------------
    # QUERIES
    # ----------------------------------------
    def get_session(self, session_id: str) -> Optional[SessionDescriptor]:
        with self._lock:
            return self._sessions.get(session_id)

    def sessions(self) -> List[SessionDescriptor]:
        with self._lock:
            return [self._sessions[k] for k in sorted(self._sessions)]

    # ----------------------------------------
    # CREATE / JOIN
    # ----------------------------------------
    def create_session(self, request: CreateSessionRequest, now: Optional[float] = None) -> SessionDescriptor:
        now = self.clock() if now is None else now
        with self._lock:
            existing = self._sessions.get(request.session_id)
            if existing is not None and existing.state.live:
                raise SessionRejected("duplicate", f"session '{request.session_id}' is already live")

            s = SessionDescriptor(
                session_id=request.session_id,
                model_name=request.model_name,
                owner=request.client_id,
                session_time=request.session_time,
                waiting_time=request.waiting_time,
                capacity_min=request.capacity_min,
                capacity_max=request.capacity_max,
                fl_rounds_max=request.fl_rounds,
                created_at=now,
            )
            s.history.append(s.state)
            s.members[request.client_id] = MemberInfo(normalize_role(request.preferred_role))
            s.transition(SessionState.WAITING)
            self._sessions[s.session_id] = s
            logging.info(
                f"🆕 Session {s.session_id} created by {s.owner} "
                f"(model={s.model_name}, capacity {s.capacity_min}..{s.capacity_max}, rounds={s.fl_rounds_max})"
            )
            if len(s.members) >= s.capacity_max:
                self._cluster(s, now)
            return s

    def join_session(self, request: JoinSessionRequest, now: Optional[float] = None) -> SessionDescriptor:
        now = self.clock() if now is None else now
        with self._lock:
            s = self._check_join(request)
            if request.client_id in s.members:
                return s

            s.members[request.client_id] = MemberInfo(normalize_role(request.preferred_role))
            logging.info(f"➕ {request.client_id} joined {s.session_id} ({len(s.members)}/{s.capacity_max})")
            if len(s.members) >= s.capacity_max:
                self._cluster(s, now)
            return s

    # ----------------------------------------
    # CLUSTERING / ROLE ARRANGEMENT
    # ----------------------------------------
    def _preferences(self, s: SessionDescriptor) -> Dict[str, Role]:
        return {cid: m.preferred_role for cid, m in s.members.items()}

    def _cluster(self, s: SessionDescriptor, now: float) -> ClusterTopology:
        s.transition(SessionState.CLUSTERING)
        policy = self.clustering_policy
        if policy.kind != "single" and len(s.members) == 1:
            logging.warning(f"{s.session_id}: one member cannot form a hierarchy; clustering as single")
            policy = ClusteringPolicy.parse("single")
        topology = build_clusters(s.session_id, self._preferences(s), policy)
        topology.version = 1
        s.topology = topology
        self.arrange_roles(s, topology, now)
        s.transition(SessionState.ACTIVE)
        logging.info(f"🌳 {s.session_id} clustered: root={topology.root}, layers={topology.layers}")
        return topology

    def _assignment(self, s: SessionDescriptor, topology: ClusterTopology, node: ClusterNode) -> RoleAssignmentMsg:
        if node.parent is None:
            parent_topic = topics.global_topic(s.session_id)
        else:
            parent_topic = topics.aggregation_inbox(s.session_id, node.parent)
        is_head = node.role.is_head
        return RoleAssignmentMsg(
            session_id=s.session_id,
            client_id=node.client_id,
            role=node.role.value,
            parent_topic=parent_topic,
            inbox_topic=topics.aggregation_inbox(s.session_id, node.client_id) if is_head else None,
            expected_input_count=node.expected_input_count,
            children=topology.children(node.client_id) if is_head else [],
            topology_version=topology.version,
            fl_rounds=s.fl_rounds_max,
            round=s.round + 1,
            aggregation_timeout=max(1.0, self.straggler_timeout - self.aggregation_margin),
        )

    def _send_assignments(self, s: SessionDescriptor, topology: ClusterTopology, client_ids: List[str], now: float):
        messages = []
        for cid in client_ids:
            msg = self._assignment(s, topology, topology.nodes[cid])
            messages.append(msg)
            self.sent_assignments += 1
            if self._send(cid, "assign_role", msg):
                s.pending_acks.add(cid)
            else:
                s.members[cid].suspect_count += 1
        s.acks_since = now
        self._broadcast(s.session_id, "topology", topology.to_message())
        return messages

    def arrange_roles(
        self, s: SessionDescriptor, topology: ClusterTopology, now: Optional[float] = None
    ) -> List[RoleAssignmentMsg]:
        """Send every member its assignment, then publish the full topology on the session topic."""
        now = self.clock() if now is None else now
        with self._lock:
            s.pending_acks.clear()
            return self._send_assignments(s, topology, topology.members(), now)

    def rearrange_roles(
        self, s: SessionDescriptor, old: ClusterTopology, new: ClusterTopology, now: Optional[float] = None
    ) -> RoleDelta:
        """Message only the clients whose assignment changed."""
        now = self.clock() if now is None else now
        with self._lock:
            delta = role_delta(old, new)
            new.version = old.version + 1 if (len(delta) or delta.departed) else old.version
            s.topology = new
            s.pending_acks.clear()
            if len(delta):
                self._send_assignments(s, new, delta.client_ids, now)
                logging.info(f"🔀 {s.session_id}: rearranged {len(delta)} client(s): {', '.join(delta.client_ids)}")
            return delta

    def role_ack(self, ack: RoleAck, now: Optional[float] = None) -> None:
        now = self.clock() if now is None else now
        with self._lock:
            s = self._sessions.get(ack.session_id)
            if s is None or s.state is not SessionState.ACTIVE:
                return
            if s.topology is None or ack.topology_version != s.topology.version:
                logging.debug(f"{ack.session_id}: stale role ack from {ack.client_id}")
                return
            s.pending_acks.discard(ack.client_id)
            if not s.pending_acks and not s.round_open:
                self._start_round(s, now)

    def _start_round(self, s: SessionDescriptor, now: float) -> None:
        for m in s.members.values():
            m.ready = False
        s.round_open = True
        s.round_started_at = now
        s.straggler_strikes = 0
        s.acks_since = None
        self._broadcast(
            s.session_id,
            "round_start",
            RoundStartMsg(session_id=s.session_id, round=s.round + 1, topology_version=s.topology.version),
        )
        logging.info(f"▶️ {s.session_id}: round {s.round + 1}/{s.fl_rounds_max} started")

    # ----------------------------------------
    # READINESS
    # ----------------------------------------
    def record_readiness(
        self, session_id: str, client_id: str, stats: ClientStats, round_no: Optional[int] = None
    ) -> bool:
        with self._lock:
            s = self._sessions.get(session_id)
            if s is None or s.state is not SessionState.ACTIVE:
                logging.info(f"ignoring readiness of {client_id} for inactive session {session_id}")
                return False
            member = s.members.get(client_id)
            if member is None:
                logging.warning(f"{session_id}: readiness from non-member {client_id} ignored")
                return False
            if round_no is not None and round_no != s.round + 1:
                logging.warning(f"{session_id}: stale readiness from {client_id} for round {round_no}")
                return False
            member.stats = stats
            member.ready = True
            member.suspect_count = 0
            return s.round_complete()

    # ----------------------------------------
    # MEMBERSHIP
    # ----------------------------------------
    def deregister(self, session_id: str, client_id: str, now: Optional[float] = None) -> bool:
        now = self.clock() if now is None else now
        with self._lock:
            s = self._sessions.get(session_id)
            if s is None or client_id not in s.members or not s.state.live:
                return False
            del s.members[client_id]
            s.pending_acks.discard(client_id)
            logging.info(f"➖ {client_id} left {session_id}")
            if not s.members:
                self._finish(s, SessionState.ABORTED if s.state is SessionState.WAITING else SessionState.TERMINATED,
                             "no members left")
            elif s.state is SessionState.ACTIVE:
                if not s.round_open and not s.pending_acks:
                    self._start_round(s, now)
            return True

    def _remove_member(self, s: SessionDescriptor, client_id: str, reason: str) -> None:
        s.members.pop(client_id, None)
        s.pending_acks.discard(client_id)
        self._send(
            client_id,
            "global_update_notice",
            SessionNotice(session_id=s.session_id, status="demoted", round=s.round, reason=reason),
        )
        logging.warning(f"🚫 {s.session_id}: removed {client_id} ({reason})")

    # ----------------------------------------
    # TICK
    # ----------------------------------------
    def tick(self, now: Optional[float] = None) -> List[SessionEvent]:
        now = self.clock() if now is None else now
        events: List[SessionEvent] = []
        with self._lock:
            for s in list(self._sessions.values()):
                if s.state.live:
                    events.extend(self._step(s, now))
        return events

    def _step(self, s: SessionDescriptor, now: float) -> List[SessionEvent]:
        events: List[SessionEvent] = []
        sid = s.session_id

        if s.state is SessionState.WAITING:
            if now < s.waiting_deadline:
                return events
            if len(s.members) >= s.capacity_min:
                self._cluster(s, now)
                events.append(SessionEvent(sid, "clustered", f"{len(s.members)} members"))
            else:
                self._finish(s, SessionState.ABORTED, f"only {len(s.members)} of {s.capacity_min} members joined")
                events.append(SessionEvent(sid, "aborted"))
            return events

        if s.state is not SessionState.ACTIVE:
            return events

        if now >= s.session_deadline:
            self._finish(s, SessionState.TERMINATED, "session time expired")
            events.append(SessionEvent(sid, "terminated", "session time expired"))
            return events

        if s.round_complete():
            s.round_open = False
            s.round += 1
            events.append(SessionEvent(sid, "round_completed", str(s.round)))
            logging.info(f"✅ {sid}: round {s.round}/{s.fl_rounds_max} complete")
            if s.round >= s.fl_rounds_max:
                self._finish(s, SessionState.TERMINATED, "all rounds done")
                events.append(SessionEvent(sid, "terminated", "all rounds done"))
                return events
            self._next_round(s, now)
            if s.round_open:
                events.append(SessionEvent(sid, "round_started", str(s.round + 1)))
            return events

        # Waiting for role acks
        if not s.round_open and s.pending_acks:
            if s.acks_since is not None and now - s.acks_since >= self.straggler_timeout:
                for cid in sorted(s.pending_acks):
                    if cid in s.members:
                        s.members[cid].suspect_count += 1
                logging.warning(f"{sid}: no role ack from {sorted(s.pending_acks)}; starting the round anyway")
                s.pending_acks.clear()
                self._start_round(s, now)
                events.append(SessionEvent(sid, "round_started", str(s.round + 1)))
            return events

        if s.round_open and s.round_started_at is not None and now - s.round_started_at >= self.straggler_timeout:
            events.extend(self._handle_stragglers(s, now))
        return events

    def _handle_stragglers(self, s: SessionDescriptor, now: float) -> List[SessionEvent]:
        events = []
        unready = sorted(cid for cid, m in s.members.items() if not m.ready)
        s.straggler_strikes += 1
        for cid in unready:
            s.members[cid].suspect_count += 1
        events.append(SessionEvent(s.session_id, "stragglers", ",".join(unready)))

        if s.straggler_strikes == 1:
            nodes = s.topology.nodes if s.topology else {}
            for cid in unready:
                node = nodes.get(cid)
                if node is not None and node.role.is_head:
                    self._send(
                        cid,
                        "aggregate_now",
                        RoundStartMsg(session_id=s.session_id, round=s.round + 1, topology_version=s.topology.version),
                    )
            logging.warning(f"⏰ {s.session_id}: round {s.round + 1} overdue, waiting on {unready}")
            s.round_started_at = now
            return events

        for cid in unready:
            if s.members[cid].suspect_count >= SUSPECT_LIMIT:
                self._remove_member(s, cid, "straggler")
                events.append(SessionEvent(s.session_id, "member_removed", cid))
        if not s.members:
            self._finish(s, SessionState.TERMINATED, "no members left")
            events.append(SessionEvent(s.session_id, "terminated", "no members left"))
            return events
        # Whoever is left closes the round; their readiness stands in for the missing ones.
        for m in s.members.values():
            m.ready = True
        s.round_started_at = now
        return events

    def _next_round(self, s: SessionDescriptor, now: float) -> None:
        old = s.topology
        base = old
        if set(s.members) != set(old.nodes):
            policy = old.policy
            if policy.kind != "single" and len(s.members) == 1:
                policy = ClusteringPolicy.parse("single")
            base = build_clusters(s.session_id, self._preferences(s), policy)
            base.version = old.version
        stats = {cid: m.stats for cid, m in s.members.items()}
        new = optimize_roles(base, stats, self.optimizer_policy)
        if new is old:
            new = ClusterTopology(old.session_id, dict(old.nodes), old.version, old.preferences, old.policy)
        self.rearrange_roles(s, old, new, now)
        if not s.pending_acks:
            self._start_round(s, now)

    def _finish(self, s: SessionDescriptor, state: SessionState, reason: str) -> None:
        s.transition(state)
        s.round_open = False
        s.pending_acks.clear()
        notice = SessionNotice(session_id=s.session_id, status=state.value, round=s.round, reason=reason)
        for cid in sorted(s.members):
            self._send(cid, "global_update_notice", notice)
        icon = "🏁" if state is SessionState.TERMINATED else "🛑"
        logging.info(f"{icon} {s.session_id} {state.value}: {reason}")

    def shutdown(self) -> None:
        with self._lock:
            for s in self._sessions.values():
                if s.state is SessionState.ACTIVE:
                    self._finish(s, SessionState.TERMINATED, "coordinator shutting down")
                elif s.state.live:
                    self._finish(s, SessionState.ABORTED, "coordinator shutting down")

    # ----------------------------------------
    # MESSAGE HANDLERS
    # ----------------------------------------
    def _reject_malformed(self, sender: str, request: str, payload: bytes, err: Exception) -> None:
        try:
            session_id = str(json.loads(payload).get("session_id", ""))
        except (ValueError, AttributeError):
            session_id = ""
        logging.warning(f"malformed {request} from {sender}: {err}")
        self._send(
            sender,
            "session_reply",
            SessionReply(request=request, session_id=session_id, accepted=False, reason=f"invalid request: {err}"),
        )

    def _on_create(self, sender: str, payload: bytes) -> None:
        try:
            req = parse_body(CreateSessionRequest, payload)
            s = self.create_session(req)
        except ProtocolError as e:
            self._reject_malformed(sender, "create", payload, e)
            return
        except (SessionRejected, ConfigurationError) as e:
            reason = getattr(e, "reason", str(e))
            logging.warning(f"rejected create of {req.session_id} by {req.client_id}: {e}")
            self._send(req.client_id, "session_reply",
                       SessionReply(request="create", session_id=req.session_id, accepted=False, reason=reason))
            return
        self._send(req.client_id, "session_reply",
                   SessionReply(request="create", session_id=s.session_id, accepted=True, state=s.state.value))

    def _on_join(self, sender: str, payload: bytes) -> None:
        try:
            req = parse_body(JoinSessionRequest, payload)
        except ProtocolError as e:
            self._reject_malformed(sender, "join", payload, e)
            return
        # Reply before the join may trigger clustering, so the accept precedes the role assignment.
        with self._lock:
            try:
                s = self._check_join(req)
            except (SessionRejected, ConfigurationError) as e:
                reason = getattr(e, "reason", str(e))
                logging.warning(f"rejected join of {req.client_id} to {req.session_id}: {e}")
                self._send(req.client_id, "session_reply",
                           SessionReply(request="join", session_id=req.session_id, accepted=False, reason=reason))
                return
            self._send(req.client_id, "session_reply",
                       SessionReply(request="join", session_id=s.session_id, accepted=True, state=s.state.value))
            self.join_session(req)

    def _check_join(self, req: JoinSessionRequest) -> SessionDescriptor:
        s = self._sessions.get(req.session_id)
        if s is None or not s.state.live:
            raise SessionRejected("unknown", f"no live session '{req.session_id}'")
        if req.client_id in s.members:
            return s
        if s.state is not SessionState.WAITING or len(s.members) >= s.capacity_max:
            raise SessionRejected("full", f"session '{s.session_id}' is not accepting members")
        if req.model_name != s.model_name:
            raise SessionRejected("model mismatch", f"model '{req.model_name}' does not match '{s.model_name}'")
        normalize_role(req.preferred_role)
        return s

    def _on_ready(self, sender: str, payload: bytes) -> None:
        try:
            msg = parse_body(ClientReadyMsg, payload)
        except ProtocolError as e:
            logging.warning(f"dropping readiness from {sender}: {e}")
            return
        if msg.missing_children:
            logging.warning(f"{msg.session_id}: {msg.client_id} aggregated without {msg.missing_children}")
        with self._lock:
            if self.record_readiness(msg.session_id, msg.client_id, msg.stats, msg.round):
                self._step(self._sessions[msg.session_id], self.clock())

    def _on_role_ack(self, sender: str, payload: bytes) -> None:
        try:
            self.role_ack(parse_body(RoleAck, payload))
        except ProtocolError as e:
            logging.warning(f"dropping role ack from {sender}: {e}")

    def _on_deregister(self, sender: str, payload: bytes) -> None:
        try:
            req = parse_body(DeregisterRequest, payload)
        except ProtocolError as e:
            logging.warning(f"dropping deregister from {sender}: {e}")
            return
        self.deregister(req.session_id, req.client_id)
