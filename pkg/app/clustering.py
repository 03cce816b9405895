"""
Cluster topologies and the pluggable role optimizers.

A topology is a tree: one root head (layer 0), optional intermediate heads
(layer 1) and leaf trainers. Heads receive updates on their aggregation
inbox and forward one aggregate to their parent; the root forwards to the
parameter server's public topic.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from app.errors import ConfigurationError, TopologyError
from app.schemas import ClientStats, TopologyMsg, TopologyNodeOut


class Role(str, Enum):
    AGGREGATOR = "aggregator"
    TRAINER_AGGREGATOR = "trainer_aggregator"
    TRAINER = "trainer"

    @property
    def trains(self) -> bool:
        return self is not Role.AGGREGATOR

    @property
    def is_head(self) -> bool:
        return self is not Role.TRAINER


_ROLE_ALIASES = {
    "aggregator": Role.AGGREGATOR,
    "trainer_aggregator": Role.TRAINER_AGGREGATOR,
    "trainer-aggregator": Role.TRAINER_AGGREGATOR,
    "trainer/aggregator": Role.TRAINER_AGGREGATOR,
    "trainer": Role.TRAINER,
}

# Lower rank = stronger claim on a head slot.
_PREFERENCE_RANK = {Role.AGGREGATOR: 0, Role.TRAINER_AGGREGATOR: 1, Role.TRAINER: 2}


def normalize_role(value: "Role | str") -> Role:
    if isinstance(value, Role):
        return value
    role = _ROLE_ALIASES.get(str(value).strip().lower())
    if role is None:
        raise ConfigurationError(f"unknown role: {value!r}")
    return role


# ----------------------------------------
# TOPOLOGY
# ----------------------------------------
@dataclass(frozen=True)
class ClusterNode:
    client_id: str
    role: Role
    parent: Optional[str]
    layer: int
    expected_input_count: int = 0

    @property
    def assignment(self) -> Tuple[Role, Optional[str], int]:
        return self.role, self.parent, self.expected_input_count


@dataclass(frozen=True)
class ClusteringPolicy:
    kind: str = "hierarchical"
    layers: int = 3
    fraction: float = 0.3

    _PATTERN = re.compile(
        r"^hierarchical\s*\(\s*(?:layers\s*=\s*)?(\d+)\s*,\s*(?:fraction\s*=\s*)?([0-9.]+)\s*\)$"
    )

    @classmethod
    def parse(cls, text: "str | ClusteringPolicy") -> "ClusteringPolicy":
        if isinstance(text, ClusteringPolicy):
            return text
        raw = str(text).strip().lower()
        if raw == "single":
            return cls("single", 2, 0.0)
        if raw == "hierarchical":
            return cls()
        m = cls._PATTERN.match(raw)
        if not m:
            raise ConfigurationError(f"unknown clustering policy: {text!r}")
        layers, fraction = int(m.group(1)), float(m.group(2))
        if layers not in (2, 3):
            raise ConfigurationError(f"only 2 or 3 layers are supported, got {layers}")
        if not 0.0 < fraction <= 1.0:
            raise ConfigurationError(f"aggregator fraction must be in (0, 1], got {fraction}")
        if layers == 2:
            return cls("single", 2, 0.0)
        return cls("hierarchical", layers, fraction)

    def aggregator_count(self, n_members: int) -> int:
        if self.kind == "single":
            return 1
        return min(n_members, max(1, math.ceil(self.fraction * n_members)))

    def __str__(self) -> str:
        if self.kind == "single":
            return "single"
        return f"hierarchical({self.layers},{self.fraction:g})"


@dataclass
class ClusterTopology:
    session_id: str
    nodes: Dict[str, ClusterNode]
    version: int = field(default=0, compare=False)
    preferences: Dict[str, Role] = field(default_factory=dict, compare=False, repr=False)
    policy: ClusteringPolicy = field(default_factory=ClusteringPolicy, compare=False, repr=False)

    @property
    def root(self) -> str:
        roots = [n.client_id for n in self.nodes.values() if n.parent is None]
        if len(roots) != 1:
            raise TopologyError(f"topology of {self.session_id} has {len(roots)} roots")
        return roots[0]

    @property
    def layers(self) -> List[List[str]]:
        depth = max((n.layer for n in self.nodes.values()), default=-1)
        return [sorted(c for c, n in self.nodes.items() if n.layer == i) for i in range(depth + 1)]

    def heads(self) -> List[str]:
        """Root first, then intermediates in layer order."""
        return [c for layer in self.layers for c in layer if self.nodes[c].role.is_head]

    def children(self, head: str) -> List[str]:
        return sorted(c for c, n in self.nodes.items() if n.parent == head)

    def members(self) -> List[str]:
        return sorted(self.nodes)

    def validate(self) -> "ClusterTopology":
        if not self.nodes:
            raise TopologyError("topology has no nodes")
        root = self.root
        if self.nodes[root].layer != 0 or not self.nodes[root].role.is_head:
            raise TopologyError(f"root {root} must be a head in layer 0")
        for cid, node in self.nodes.items():
            if node.parent is None:
                continue
            parent = self.nodes.get(node.parent)
            if parent is None or not parent.role.is_head:
                raise TopologyError(f"{cid} has no valid head as parent")
            if parent.layer >= node.layer:
                raise TopologyError(f"{cid} is not below its parent {node.parent}")
            if node.role is Role.TRAINER and self.children(cid):
                raise TopologyError(f"trainer {cid} has children")
        for cid, node in self.nodes.items():
            if node.role is Role.TRAINER:
                if node.expected_input_count != 0:
                    raise TopologyError(f"trainer {cid} expects inputs")
                continue
            expected = len(self.children(cid)) + int(node.role.trains)
            if node.expected_input_count != expected:
                raise TopologyError(f"{cid} expects {node.expected_input_count} inputs, tree implies {expected}")
        return self

    def to_message(self) -> TopologyMsg:
        return TopologyMsg(
            session_id=self.session_id,
            topology_version=self.version,
            root=self.root,
            layers=self.layers,
            nodes=[
                TopologyNodeOut(
                    client_id=n.client_id,
                    role=n.role.value,
                    parent=n.parent,
                    layer=n.layer,
                    expected_input_count=n.expected_input_count,
                )
                for _, n in sorted(self.nodes.items())
            ],
        )


def head_candidates(preferences: Mapping[str, Role]) -> List[str]:
    return sorted(preferences, key=lambda c: (_PREFERENCE_RANK[preferences[c]], c))


def build_clusters(
    session_id: str,
    members: Mapping[str, "Role | str"],
    policy: "ClusteringPolicy | str" = ClusteringPolicy(),
    *,
    heads: Optional[Sequence[str]] = None,
) -> ClusterTopology:
    """
    Lay out `members` (client_id -> preferred role) as a cluster tree.

    `heads` fixes which clients aggregate (root first); by default the
    strongest head candidates by preferred role win, ties by client_id.
    Only heads that prefer trainer-aggregator add their own update.
    """
    if not members:
        raise TopologyError("cannot cluster an empty member set")
    policy = ClusteringPolicy.parse(policy)
    prefs = {cid: normalize_role(r) for cid, r in members.items()}

    if heads is None:
        heads = head_candidates(prefs)[: policy.aggregator_count(len(prefs))]
    heads = list(heads)
    if not heads or len(set(heads)) != len(heads) or any(h not in prefs for h in heads):
        raise TopologyError(f"invalid head selection {heads!r}")

    root, intermediates = heads[0], heads[1:]
    trainers = sorted(c for c in prefs if c not in heads)

    parent_of: Dict[str, str] = {h: root for h in intermediates}
    upper = intermediates or [root]
    for i, cid in enumerate(trainers):
        parent_of[cid] = upper[i % len(upper)]

    child_count: Dict[str, int] = {}
    for p in parent_of.values():
        child_count[p] = child_count.get(p, 0) + 1

    def head_role(cid: str) -> Role:
        if prefs[cid] is Role.TRAINER_AGGREGATOR or not child_count.get(cid):
            # A childless head has nothing to aggregate unless it trains; a lone
            # root that asked to be a pure aggregator forwards the model as is.
            if cid == root and prefs[cid] is Role.AGGREGATOR:
                return Role.AGGREGATOR
            return Role.TRAINER_AGGREGATOR
        return Role.AGGREGATOR

    nodes: Dict[str, ClusterNode] = {}
    for cid in heads:
        role = head_role(cid)
        nodes[cid] = ClusterNode(
            client_id=cid,
            role=role,
            parent=None if cid == root else root,
            layer=0 if cid == root else 1,
            expected_input_count=child_count.get(cid, 0) + int(role.trains),
        )
    trainer_layer = 2 if intermediates else 1
    for cid in trainers:
        nodes[cid] = ClusterNode(cid, Role.TRAINER, parent_of[cid], trainer_layer, 0)

    return ClusterTopology(session_id, nodes, preferences=prefs, policy=policy).validate()


# ----------------------------------------
# ROLE OPTIMIZERS
# ----------------------------------------
StatsMap = Mapping[str, Optional[ClientStats]]
Optimizer = Callable[[ClusterTopology, StatsMap], ClusterTopology]

OPTIMIZERS: Dict[str, Optimizer] = {}


def register_optimizer(name: str) -> Callable[[Optimizer], Optimizer]:
    def deco(fn: Optimizer) -> Optimizer:
        OPTIMIZERS[name] = fn
        return fn

    return deco


def optimize_roles(topology: ClusterTopology, stats: StatsMap, policy: str = "static") -> ClusterTopology:
    fn = OPTIMIZERS.get(policy)
    if fn is None:
        raise ConfigurationError(f"unknown optimizer policy '{policy}' (known: {', '.join(sorted(OPTIMIZERS))})")
    return fn(topology, stats)


def _rebuild(topology: ClusterTopology, heads: Sequence[str]) -> ClusterTopology:
    out = build_clusters(topology.session_id, topology.preferences, topology.policy, heads=heads)
    out.version = topology.version
    return out


def _head_count(topology: ClusterTopology) -> int:
    return topology.policy.aggregator_count(len(topology.nodes))


@register_optimizer("static")
def _static(topology: ClusterTopology, stats: StatsMap) -> ClusterTopology:
    return topology


@register_optimizer("memory-greedy")
def _memory_greedy(topology: ClusterTopology, stats: StatsMap) -> ClusterTopology:
    def key(cid: str) -> Tuple[int, str]:
        s = stats.get(cid)
        return (-(s.free_memory if s is not None else -1), cid)

    ranked = sorted(topology.nodes, key=key)
    return _rebuild(topology, ranked[: _head_count(topology)])


@register_optimizer("round-robin")
def _round_robin(topology: ClusterTopology, stats: StatsMap) -> ClusterTopology:
    ordered = topology.members()
    n = len(ordered)
    positions = [ordered.index(h) for h in topology.heads()]
    shifted = [ordered[(p + 1) % n] for p in positions]
    want = _head_count(topology)
    if len(shifted) < want:
        start = (positions[-1] + 2) % n if positions else 0
        for k in range(n):
            cid = ordered[(start + k) % n]
            if len(shifted) >= want:
                break
            if cid not in shifted:
                shifted.append(cid)
    return _rebuild(topology, shifted[:want])


def _rank_scores(values: Mapping[str, Optional[float]]) -> Dict[str, float]:
    """Fraction of other clients each client beats; missing values rank last."""
    known = sorted({v for v in values.values() if v is not None})
    if not known:
        return {c: 0.0 for c in values}
    denom = max(1, len(known) - 1)
    index = {v: i for i, v in enumerate(known)}
    return {c: (index[v] / denom if v is not None else -1.0) for c, v in values.items()}


@register_optimizer("resource-score")
def _resource_score(topology: ClusterTopology, stats: StatsMap) -> ClusterTopology:
    cids = topology.members()

    def metric(get: Callable[[ClientStats], Optional[float]]) -> Dict[str, float]:
        return _rank_scores({c: (get(stats[c]) if stats.get(c) is not None else None) for c in cids})

    parts = [
        metric(lambda s: float(s.free_memory)),
        metric(lambda s: s.bandwidth),
        metric(lambda s: 1.0 - s.cpu_utilization),
    ]
    if any(stats.get(c) is not None and stats[c].last_accuracy is not None for c in cids):
        parts.append(metric(lambda s: s.last_accuracy))

    score = {c: sum(p[c] for p in parts) / len(parts) for c in cids}
    ranked = sorted(cids, key=lambda c: (-score[c], c))
    return _rebuild(topology, ranked[: _head_count(topology)])


# ----------------------------------------
# REARRANGEMENT
# ----------------------------------------
@dataclass(frozen=True)
class RoleChange:
    client_id: str
    old: Optional[ClusterNode]
    new: ClusterNode

    @property
    def new_parent(self) -> Optional[str]:
        return self.new.parent


@dataclass(frozen=True)
class RoleDelta:
    changes: Tuple[RoleChange, ...]
    departed: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.changes)

    @property
    def client_ids(self) -> List[str]:
        return [c.client_id for c in self.changes]


def role_delta(old: Optional[ClusterTopology], new: ClusterTopology) -> RoleDelta:
    """Clients of `new` whose (role, parent, expected_input_count) differ from `old`."""
    old_nodes = old.nodes if old is not None else {}
    changes = tuple(
        RoleChange(cid, old_nodes.get(cid), node)
        for cid, node in sorted(new.nodes.items())
        if cid not in old_nodes or old_nodes[cid].assignment != node.assignment
    )
    departed = tuple(sorted(set(old_nodes) - set(new.nodes)))
    if changes:
        logging.debug(f"{new.session_id}: {len(changes)} role change(s), {len(departed)} departed")
    return RoleDelta(changes, departed)
