import random

import pytest
from pydantic import ValidationError

from app import topics
from app.clustering import ClusterTopology, Role, build_clusters, role_delta
from app.coordinator import Coordinator, SessionState
from app.errors import ConfigurationError, CoordinatorError, SessionRejected, TransportError
from app.schemas import (
    ClientReadyMsg,
    ClientStats,
    CreateSessionRequest,
    JoinSessionRequest,
    RoleAck,
    SessionReply,
)


class FakeFleet:
    """Stands in for a FleetEndpoint and records every outbound call."""

    base_topic = topics.COORD_TOPIC

    def __init__(self):
        self.sent = []
        self.bindings = {}
        self.unreachable = set()

    def bind_function(self, name, handler, *, topic=None):
        self.bindings[name] = handler

    def call_json(self, target, fn, body):
        if any(target == topics.client_topic(c) for c in self.unreachable):
            raise TransportError("client offline")
        self.sent.append((target, fn, body))
        return "0" * 32

    def calls(self, fn):
        return [(t, b) for t, f, b in self.sent if f == fn]

    def clear(self):
        self.sent.clear()


@pytest.fixture
def fleet():
    return FakeFleet()


@pytest.fixture
def coord(fleet, clock):
    return Coordinator(fleet, clustering_policy="hierarchical(3,0.3)", straggler_timeout=120, clock=clock).bind()


def _create(coord, *, session="s1", owner="c0", cap_min=1, cap_max=5, rounds=2, session_time=3600, waiting_time=60, role="trainer"):
    return coord.create_session(
        CreateSessionRequest(
            client_id=owner,
            session_id=session,
            model_name="mlp",
            session_time=session_time,
            waiting_time=waiting_time,
            capacity_min=cap_min,
            capacity_max=cap_max,
            fl_rounds=rounds,
            preferred_role=role,
        )
    )


def _join(coord, client, session="s1", model="mlp", role="trainer"):
    return coord.join_session(
        JoinSessionRequest(client_id=client, session_id=session, model_name=model, preferred_role=role)
    )


def _fill(coord, n, **kw):
    s = _create(coord, cap_max=n, **kw)
    for i in range(1, n):
        _join(coord, f"c{i}")
    return s


def _ack_all(coord, s):
    for cid in sorted(s.pending_acks):
        coord.role_ack(RoleAck(session_id=s.session_id, client_id=cid, topology_version=s.topology.version))


def _ready_all(coord, s, skip=()):
    done = False
    for cid in sorted(s.members):
        if cid not in skip:
            stats = ClientStats(client_id=cid, free_memory=1000 + int(cid[1:]))
            done = coord.record_readiness(s.session_id, cid, stats, s.round + 1)
    return done


# ----------------------------------------
# CREATE / JOIN
# ----------------------------------------
def test_create_opens_waiting_session(coord):
    s = _create(coord)
    assert s.state is SessionState.WAITING
    assert list(s.members) == ["c0"]
    assert s.history == [SessionState.CREATED, SessionState.WAITING]


def test_duplicate_live_session_rejected(coord):
    _create(coord)
    with pytest.raises(SessionRejected) as err:
        _create(coord, owner="c9")
    assert err.value.reason == "duplicate"
    assert coord.get_session("s1").owner == "c0"


def test_session_id_reusable_after_it_ends(coord, clock):
    _create(coord, cap_min=3)
    clock.advance(61)
    coord.tick()
    assert coord.get_session("s1").state is SessionState.ABORTED
    assert _create(coord, owner="c5").owner == "c5"


def test_capacity_order_validated():
    with pytest.raises(ValidationError):
        CreateSessionRequest(client_id="c", session_id="s", model_name="m", capacity_min=5, capacity_max=2)


def test_filling_capacity_triggers_clustering(coord, fleet):
    s = _create(coord, cap_max=5)
    for i in range(1, 4):
        _join(coord, f"c{i}")
        assert s.state is SessionState.WAITING
    _join(coord, "c4")
    assert s.state is SessionState.ACTIVE
    assert s.history[-3:] == [SessionState.WAITING, SessionState.CLUSTERING, SessionState.ACTIVE]

    assignments = fleet.calls("assign_role")
    assert sorted(t for t, _ in assignments) == sorted(topics.client_topic(f"c{i}") for i in range(5))
    assert len(fleet.calls("topology")) == 1
    assert fleet.calls("topology")[0][0] == topics.session_topic("s1")


@pytest.mark.parametrize(
    "client, model, expected",
    [("late", "mlp", "full"), ("c1", "cnn", "model mismatch")],
)
def test_join_rejections(coord, client, model, expected):
    if expected == "full":
        _fill(coord, 2)
    else:
        _create(coord)
    with pytest.raises(SessionRejected) as err:
        _join(coord, client, model=model)
    assert err.value.reason == expected


def test_join_unknown_session(coord):
    with pytest.raises(SessionRejected) as err:
        _join(coord, "c1", session="nope")
    assert err.value.reason == "unknown"


def test_rejoin_is_idempotent(coord):
    s = _create(coord)
    _join(coord, "c1")
    _join(coord, "c1")
    assert sorted(s.members) == ["c0", "c1"]


def test_unknown_optimizer_rejected(fleet):
    with pytest.raises(ConfigurationError):
        Coordinator(fleet, optimizer_policy="swarm")


# ----------------------------------------
# ROLE ARRANGEMENT
# ----------------------------------------
def test_assignment_contents(coord, fleet):
    s = _fill(coord, 10)
    by_client = {b.client_id: b for _, b in fleet.calls("assign_role")}
    topo = s.topology

    root = by_client[topo.root]
    assert root.parent_topic == topics.global_topic("s1")
    assert root.inbox_topic == topics.aggregation_inbox("s1", topo.root)

    for cid, node in topo.nodes.items():
        msg = by_client[cid]
        assert msg.expected_input_count == node.expected_input_count
        assert msg.round == 1 and msg.fl_rounds == 2
        if node.role is Role.TRAINER:
            assert msg.inbox_topic is None and msg.children == []
            assert msg.parent_topic == topics.aggregation_inbox("s1", node.parent)


def test_unreachable_member_becomes_suspect(coord, fleet):
    fleet.unreachable.add("c2")
    s = _fill(coord, 3)
    assert s.members["c2"].suspect_count == 1
    assert "c2" not in s.pending_acks


def test_round_starts_once_every_ack_arrives(coord, fleet):
    s = _fill(coord, 4)
    acks = sorted(s.pending_acks)
    for cid in acks[:-1]:
        coord.role_ack(RoleAck(session_id="s1", client_id=cid, topology_version=1))
    assert fleet.calls("round_start") == []
    coord.role_ack(RoleAck(session_id="s1", client_id=acks[-1], topology_version=99))
    assert fleet.calls("round_start") == []
    coord.role_ack(RoleAck(session_id="s1", client_id=acks[-1], topology_version=1))
    (start,) = fleet.calls("round_start")
    assert start[1].round == 1
    assert s.round_open


def test_missing_acks_time_out(coord, fleet, clock):
    s = _fill(coord, 3)
    coord.role_ack(RoleAck(session_id="s1", client_id="c0", topology_version=1))
    clock.advance(121)
    events = coord.tick()
    assert [e.kind for e in events] == ["round_started"]
    assert s.members["c1"].suspect_count == 1 and s.members["c0"].suspect_count == 0


# ----------------------------------------
# ROUNDS
# ----------------------------------------
def test_readiness_completes_round(coord, fleet):
    s = _fill(coord, 5)
    _ack_all(coord, s)
    members = sorted(s.members)
    for cid in members[:-1]:
        assert not coord.record_readiness("s1", cid, ClientStats(client_id=cid), 1)
    # duplicate report changes nothing
    assert not coord.record_readiness("s1", members[0], ClientStats(client_id=members[0]), 1)
    assert coord.record_readiness("s1", members[-1], ClientStats(client_id=members[-1]), 1)


def test_readiness_ignored_when_stale_or_foreign(coord):
    s = _fill(coord, 2)
    _ack_all(coord, s)
    assert not coord.record_readiness("s1", "stranger", ClientStats(client_id="stranger"))
    assert not coord.record_readiness("s1", "c0", ClientStats(client_id="c0"), round_no=7)
    assert not s.members["c0"].ready


def test_completed_round_with_unchanged_roles_sends_no_assignments(coord, fleet):
    s = _fill(coord, 5, rounds=3)
    _ack_all(coord, s)
    fleet.clear()
    assert _ready_all(coord, s)
    events = coord.tick()
    assert [e.kind for e in events] == ["round_completed", "round_started"]
    assert s.round == 1
    assert fleet.calls("assign_role") == []
    assert [b.round for _, b in fleet.calls("round_start")] == [2]


def test_last_round_terminates_session(coord, fleet):
    s = _fill(coord, 3, rounds=1)
    _ack_all(coord, s)
    _ready_all(coord, s)
    fleet.clear()
    events = coord.tick()
    assert events[-1].kind == "terminated"
    assert s.state is SessionState.TERMINATED and s.round == 1
    notices = fleet.calls("global_update_notice")
    assert sorted(t for t, _ in notices) == sorted(topics.client_topic(c) for c in s.members)
    assert {b.status for _, b in notices} == {"terminated"}


def test_terminated_session_ignores_readiness(coord):
    s = _fill(coord, 2, rounds=1)
    _ack_all(coord, s)
    _ready_all(coord, s)
    coord.tick()
    assert not coord.record_readiness("s1", "c0", ClientStats(client_id="c0"))
    with pytest.raises(CoordinatorError):
        s.transition(SessionState.ACTIVE)


def test_waiting_expiry_aborts_underfilled_session(coord, clock):
    s = _create(coord, cap_min=5, cap_max=8)
    _join(coord, "c1")
    _join(coord, "c2")
    clock.advance(59)
    assert coord.tick() == []
    clock.advance(1)
    assert [e.kind for e in coord.tick()] == ["aborted"]
    assert s.state is SessionState.ABORTED
    assert SessionState.CLUSTERING not in s.history


def test_waiting_expiry_clusters_when_minimum_met(coord, clock):
    s = _create(coord, cap_min=2, cap_max=8)
    _join(coord, "c1")
    clock.advance(60)
    assert [e.kind for e in coord.tick()] == ["clustered"]
    assert s.state is SessionState.ACTIVE


def test_session_time_expiry_terminates_mid_round(coord, clock):
    s = _fill(coord, 3, session_time=300)
    _ack_all(coord, s)
    clock.advance(300)
    assert [e.kind for e in coord.tick()] == ["terminated"]
    assert s.state is SessionState.TERMINATED


def test_optimizer_rearranges_between_rounds(fleet, clock):
    coord = Coordinator(fleet, clustering_policy="single", optimizer_policy="memory-greedy", clock=clock).bind()
    s = _fill(coord, 4, rounds=3)
    first_root = s.topology.root
    _ack_all(coord, s)
    fleet.clear()
    # c3 reports the most memory, so it takes over the root and every trainer is re-parented
    _ready_all(coord, s)
    coord.tick()
    assert s.topology.root == "c3" != first_root
    assert s.topology.version == 2
    changed = sorted(b.client_id for _, b in fleet.calls("assign_role"))
    assert changed == s.topology.members()
    assert fleet.calls("round_start") == []
    _ack_all(coord, s)
    assert [b.round for _, b in fleet.calls("round_start")] == [2]


def test_straggler_two_strikes(coord, fleet, clock):
    s = _fill(coord, 5)
    _ack_all(coord, s)
    root = s.topology.root
    lazy = [c for c in s.topology.members() if s.topology.nodes[c].role is Role.TRAINER][0]
    _ready_all(coord, s, skip=(root, lazy))
    fleet.clear()

    clock.advance(120)
    events = coord.tick()
    assert events[0].kind == "stragglers"
    assert [t for t, _ in fleet.calls("aggregate_now")] == [topics.client_topic(root)]
    assert root in s.members and lazy in s.members

    coord.record_readiness("s1", root, ClientStats(client_id=root), 1)
    clock.advance(120)
    events = coord.tick()
    assert ("member_removed", lazy) in [(e.kind, e.detail) for e in events]
    assert lazy not in s.members and root in s.members
    assert [b.status for _, b in fleet.calls("global_update_notice")] == ["demoted"]

    events = coord.tick()
    assert events[0].kind == "round_completed"
    assert lazy not in s.topology.nodes


def test_deregister_of_last_member_aborts_waiting_session(coord):
    s = _create(coord, cap_max=3)
    assert coord.deregister("s1", "c0")
    assert s.state is SessionState.ABORTED
    assert not coord.deregister("s1", "c0")


# ----------------------------------------
# REARRANGEMENT
# ----------------------------------------
def test_rearrangement_messages_exactly_the_delta(coord, fleet):
    rng = random.Random(17)
    _fill(coord, 2)
    s = coord.get_session("s1")
    for _ in range(100):
        n = rng.randint(1, 25)
        members = {f"m{i:02d}": rng.choice(list(Role)) for i in range(n)}
        policy = rng.choice(["single", "hierarchical(3,0.3)", "hierarchical(3,0.5)"])
        ids = sorted(members)
        k = min(len(ids), rng.randint(1, 5)) if policy != "single" else 1
        old = build_clusters("s1", members, policy, heads=rng.sample(ids, k))
        new = build_clusters("s1", members, policy, heads=rng.sample(ids, k))

        fleet.clear()
        delta = coord.rearrange_roles(s, old, new)
        assert len(fleet.calls("assign_role")) == len(delta) == len(role_delta(old, new))
        assert sorted(b.client_id for _, b in fleet.calls("assign_role")) == delta.client_ids
        if old == new:
            assert fleet.sent == []


def test_identical_rearrangement_keeps_version(coord):
    s = _fill(coord, 3)
    old = s.topology
    copy = ClusterTopology(old.session_id, dict(old.nodes), old.version)
    assert len(coord.rearrange_roles(s, old, copy)) == 0
    assert copy.version == old.version


# ----------------------------------------
# WIRE HANDLERS
# ----------------------------------------
def test_create_handler_replies_and_rejects(coord, fleet):
    body = CreateSessionRequest(client_id="c0", session_id="s1", model_name="m", capacity_max=3)
    coord._on_create("c0", body.model_dump_json().encode())
    dup = body.model_copy(update={"client_id": "c7"})
    coord._on_create("c7", dup.model_dump_json().encode())

    replies = {t: b for t, b in fleet.calls("session_reply")}
    assert replies[topics.client_topic("c0")] == SessionReply(request="create", session_id="s1", accepted=True, state="waiting")
    assert replies[topics.client_topic("c7")].accepted is False
    assert replies[topics.client_topic("c7")].reason == "duplicate"


def test_malformed_request_gets_rejection(coord, fleet):
    coord._on_join("c3", b'{"session_id": "s1"')
    ((target, reply),) = fleet.calls("session_reply")
    assert target == topics.client_topic("c3")
    assert reply.accepted is False and reply.request == "join"


def test_join_accept_precedes_assignment(coord, fleet):
    _create(coord, cap_max=2)
    body = JoinSessionRequest(client_id="c1", session_id="s1", model_name="mlp")
    coord._on_join("c1", body.model_dump_json().encode())
    to_c1 = [f for t, f, _ in fleet.sent if t == topics.client_topic("c1")]
    assert to_c1 == ["session_reply", "assign_role"]


def test_ready_handler_closes_round(coord, fleet):
    s = _fill(coord, 2, rounds=1)
    _ack_all(coord, s)
    for cid in sorted(s.members):
        msg = ClientReadyMsg(session_id="s1", client_id=cid, round=1, stats=ClientStats(client_id=cid))
        coord._on_ready(cid, msg.model_dump_json().encode())
    assert s.state is SessionState.TERMINATED
