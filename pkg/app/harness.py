"""
Desk-scale experiment harness.

run_experiment() spins up an embedded deployment (in-memory brokers,
coordinator, parameter server, one thread per client), runs a session to
completion and returns one RoundRecord per round.

Round delay is either measured (wall clock, start broadcast -> global model
applied at the slowest client) or, when a latency model is configured,
computed by simulate_round_delay() over the round's topology:

- every receiver drains its inbox serially, one transfer at a time
- broadcasts reach all receivers in parallel
- a message costs per_message_ms + per_byte_ns * size for each wire batch
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from app.clustering import ClusteringPolicy, ClusterTopology, Role, build_clusters
from app.config import CHUNK_LIMIT_BYTES
from app.errors import ConfigurationError
from app.fleet_control import wire_sizes
from app.model_core import (
    Dataset,
    ModelParameters,
    evaluate,
    init_params,
    parse_dataset_spec,
    serialize_params,
    train_local,
)
from app.runtime import init_runtime, shutdown_runtime, start_background
from app.schemas import ClientStats, UpdateMeta, pack_update
from app.transport import InMemoryBroker, LatencyModel, bridge_link

CSV_FIELDS = ["round", "delay_ms", "train_ms", "agg_ms", "transport_ms", "accuracy"]
SUMMARY_FIELDS = ["scenario", "n_clients", "clustering", "rounds", "mean_delay_ms", "final_accuracy"]
DEFAULT_SWEEP = (5, 10, 20, 40)
DEFAULT_TOPOLOGIES = ("single", "hierarchical(3,0.3)")
# every simulated client holds a data shard, so heads train too
DEFAULT_PREFERRED_ROLE = "trainer_aggregator"
_NOTICE_BYTES = 160


# ----------------------------------------
# CONFIG
# ----------------------------------------
class LatencyConfig(BaseModel):
    per_message_ms: float = Field(0.0, ge=0)
    per_byte_ns: float = Field(0.0, ge=0)
    train_ms_per_epoch: float = Field(0.0, ge=0)
    agg_ms_per_input: float = Field(0.0, ge=0)
    inject: bool = False  # also sleep in the broker dispatch path

    def transport(self) -> LatencyModel:
        return LatencyModel(self.per_message_ms, self.per_byte_ns)


class ScenarioConfig(BaseModel):
    name: str = "scenario"
    session_id: str = "session_01"
    model_name: str = "sdflmq-model"
    n_clients: int = Field(5, ge=1)
    clustering: str = "single"
    optimizer: str = "static"
    fl_rounds: int = Field(2, ge=1)
    epochs: int = Field(5, ge=1)
    learning_rate: float = Field(0.1, gt=0)
    batch_size: int = Field(32, ge=1)
    model: str = "logreg"
    hidden: int = Field(32, ge=1)
    dataset: str = "synthetic:classes=10,features=20,samples=4000,seed=0"
    client_fraction: Optional[float] = Field(None, gt=0, le=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    seed: int = 0
    preferred_roles: Dict[str, str] = Field(default_factory=dict)
    latency: Optional[LatencyConfig] = None
    bridged: bool = False
    round_timeout: float = Field(120.0, gt=0)
    straggler_timeout: float = Field(120.0, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "ScenarioConfig":
        if self.client_fraction is not None and self.client_fraction * self.n_clients > 1.0 + 1e-9:
            raise ValueError("client shares must sum to at most 1")
        ClusteringPolicy.parse(self.clustering)
        return self

    def effective_clustering(self) -> str:
        policy = ClusteringPolicy.parse(self.clustering)
        if self.n_clients == 1 and policy.kind != "single":
            logging.warning(f"{self.name}: a {policy} hierarchy needs more than one client; using single")
            return "single"
        return str(policy)


@dataclass(frozen=True)
class RoundRecord:
    session_id: str
    round: int
    delay_ms: float
    train_ms: float
    agg_ms: float
    transport_ms: float
    accuracy: float

    def row(self) -> Dict[str, object]:
        return {
            "round": self.round,
            "delay_ms": f"{self.delay_ms:.3f}",
            "train_ms": f"{self.train_ms:.3f}",
            "agg_ms": f"{self.agg_ms:.3f}",
            "transport_ms": f"{self.transport_ms:.3f}",
            "accuracy": f"{self.accuracy:.6f}",
        }


@dataclass
class ExperimentResult:
    config: ScenarioConfig
    records: List[RoundRecord]
    global_models: Dict[int, ModelParameters]
    global_weights: Dict[int, float]
    client_models: Dict[str, ModelParameters]
    sample_counts: Dict[str, int]
    topologies: Dict[int, ClusterTopology] = field(default_factory=dict)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].accuracy if self.records else 0.0

    @property
    def mean_delay_ms(self) -> float:
        return float(np.mean([r.delay_ms for r in self.records])) if self.records else 0.0


# ----------------------------------------
# DELAY MODEL
# ----------------------------------------
@dataclass(frozen=True)
class PhaseBreakdown:
    total_ms: float
    train_ms: float
    agg_ms: float
    transport_ms: float


def _transfer_ms(latency: LatencyModel, sizes: Sequence[int]) -> float:
    return sum(latency.cost_ms(n) for n in sizes)


def simulate_round_delay(
    topology: ClusterTopology,
    update_bytes: int,
    latency: LatencyConfig,
    *,
    epochs: int = 1,
    chunk_limit: int = CHUNK_LIMIT_BYTES,
    batch_sizes: Optional[Sequence[int]] = None,
) -> PhaseBreakdown:
    """
    Time from round start to the global model reaching the slowest client.
    `batch_sizes` (wire sizes of one update) overrides the estimate derived
    from `update_bytes` and `chunk_limit`.
    """
    link = latency.transport()
    if batch_sizes is None:
        full, rest = divmod(update_bytes, chunk_limit)
        batch_sizes = [chunk_limit] * full + ([rest] if rest or not full else [])
    blob_ms = _transfer_ms(link, batch_sizes)
    notice_ms = link.cost_ms(_NOTICE_BYTES)
    train_ms = latency.train_ms_per_epoch * epochs

    start = notice_ms
    ready: Dict[str, float] = {}
    agg_per_layer: Dict[int, float] = {}

    for layer in reversed(topology.layers):
        for cid in layer:
            node = topology.nodes[cid]
            if node.role is Role.TRAINER:
                ready[cid] = start + train_ms
                continue
            own_done = start + train_ms if node.role.trains else start
            inbox_free = start
            for child in sorted(topology.children(cid), key=lambda c: (ready[c], c)):
                inbox_free = max(inbox_free, ready[child]) + blob_ms
            agg = latency.agg_ms_per_input * node.expected_input_count
            agg_per_layer[node.layer] = max(agg_per_layer.get(node.layer, 0.0), agg)
            ready[cid] = max(inbox_free, own_done) + agg

    root = topology.root
    # root -> parameter server, then one parallel rebroadcast
    total = ready[root] + blob_ms + blob_ms
    trains = any(n.role.trains for n in topology.nodes.values())
    train_phase = train_ms if trains else 0.0
    agg_phase = sum(agg_per_layer.values())
    return PhaseBreakdown(total, train_phase, agg_phase, max(0.0, total - train_phase - agg_phase))


def update_wire_sizes(params: ModelParameters, session_id: str = "session_01") -> List[int]:
    meta = UpdateMeta(session_id=session_id, round=1, sender="client_000", weight=1.0)
    return wire_sizes(pack_update(meta, serialize_params(params)))


# ----------------------------------------
# DATA
# ----------------------------------------
def prepare_data(config: ScenarioConfig) -> Tuple[List[Dataset], Dataset]:
    data = parse_dataset_spec(config.dataset)
    train, test = data.split(config.test_fraction, seed=config.seed)
    shards = train.shards(config.n_clients, config.client_fraction, seed=config.seed)
    return shards, test


def _initial_params(config: ScenarioConfig, shards: Sequence[Dataset]) -> ModelParameters:
    ref = shards[0]
    return init_params(config.model, ref.n_features, ref.n_classes, hidden=config.hidden, seed=config.seed)


def centralized_baseline(config: ScenarioConfig) -> float:
    """Accuracy of one model trained on the pooled client shards for the same number of epochs."""
    shards, test = prepare_data(config)
    pooled = Dataset.concat(shards)
    params = _initial_params(config, shards)
    for r in range(config.fl_rounds):
        params = train_local(
            params, pooled, config.epochs, config.learning_rate, config.seed + r, batch_size=config.batch_size
        ).params
    return evaluate(params, test)


def _synthetic_stats(client_id: str, rng: np.random.Generator) -> ClientStats:
    return ClientStats(
        client_id=client_id,
        free_memory=int(rng.integers(1 << 30, 8 << 30)),
        bandwidth=float(rng.uniform(1e6, 1e8)),
        cpu_utilization=float(rng.uniform(0.0, 1.0)),
    )


# ----------------------------------------
# EMBEDDED RUN
# ----------------------------------------
@dataclass
class _ClientTrace:
    started: Dict[int, float] = field(default_factory=dict)
    train_ms: Dict[int, float] = field(default_factory=dict)
    finished: Dict[int, float] = field(default_factory=dict)


def run_experiment(config: ScenarioConfig) -> ExperimentResult:
    from app.client import SDFLClient

    clustering = config.effective_clustering()
    shards, test = prepare_data(config)
    init = _initial_params(config, shards)
    rng = np.random.default_rng(config.seed)

    latency = config.latency.transport() if config.latency and config.latency.inject else None
    broker_a = InMemoryBroker("edge-a", latency=latency)
    brokers = [broker_a]
    if config.bridged:
        broker_b = InMemoryBroker("edge-b", latency=latency)
        bridge_link(broker_a, broker_b, ["sdflmq/#"])
        brokers.append(broker_b)

    rt = init_runtime(
        broker_a,
        clustering_policy=clustering,
        optimizer_policy=config.optimizer,
        straggler_timeout=config.straggler_timeout,
        store_path=None,
    )
    rt.param_server.retention = max(rt.param_server.retention, config.fl_rounds)
    start_background(rt, interval=0.05)

    ids = [f"client_{i:03d}" for i in range(config.n_clients)]
    split = (config.n_clients + 1) // 2
    clients = [
        SDFLClient(
            cid,
            brokers[1] if config.bridged and i >= split else broker_a,
            request_timeout=config.round_timeout,
            aggregation_timeout=config.round_timeout,
            stats_override=_synthetic_stats(cid, rng),
        )
        for i, cid in enumerate(ids)
    ]
    traces = {cid: _ClientTrace() for cid in ids}
    topologies: Dict[int, ClusterTopology] = {}
    sid = config.session_id

    def role_of(cid: str) -> str:
        return config.preferred_roles.get(cid, DEFAULT_PREFERRED_ROLE)

    try:
        clients[0].create_fl_session(
            sid,
            model_name=config.model_name,
            session_time=max(3600.0, config.round_timeout * config.fl_rounds * 4),
            waiting_time=config.round_timeout,
            capacity_min=config.n_clients,
            capacity_max=config.n_clients,
            fl_rounds=config.fl_rounds,
            preferred_role=role_of(ids[0]),
        )
        for c in clients[1:]:
            c.join_fl_session(sid, model_name=config.model_name, fl_rounds=config.fl_rounds, preferred_role=role_of(c.client_id))
        for c in clients:
            c.set_model(sid, init, n_samples=len(shards[ids.index(c.client_id)]))

        def worker(index: int) -> None:
            c, shard, trace = clients[index], shards[index], traces[ids[index]]
            for _ in range(config.fl_rounds):
                r = c.wait_round_start(sid, timeout=config.round_timeout)
                trace.started[r] = time.perf_counter()
                if index == 0:
                    s = rt.coordinator.get_session(sid)
                    if s is not None and s.topology is not None:
                        topologies[r] = s.topology
                t0 = time.perf_counter()
                c.train_round(
                    sid,
                    shard,
                    epochs=config.epochs,
                    learning_rate=config.learning_rate,
                    seed=config.seed * 7919 + index * 101 + r,
                    batch_size=config.batch_size,
                )
                trace.train_ms[r] = (time.perf_counter() - t0) * 1000.0
                c.wait_global_update(sid, timeout=config.round_timeout)
                trace.finished[r] = time.perf_counter()

        with ThreadPoolExecutor(max_workers=config.n_clients, thread_name_prefix="fl-client") as pool:
            for f in [pool.submit(worker, i) for i in range(config.n_clients)]:
                f.result()

        server = rt.param_server
        global_models: Dict[int, ModelParameters] = {}
        global_weights: Dict[int, float] = {}
        for r in server.rounds(sid):
            record = server.get_record(sid, r)
            global_models[r] = record.params
            global_weights[r] = record.weight

        update_sizes = update_wire_sizes(init, sid)
        records = []
        for r in range(1, config.fl_rounds + 1):
            accuracy = evaluate(global_models[r], test)
            if config.latency is not None and r in topologies:
                phases = simulate_round_delay(
                    topologies[r], 0, config.latency, epochs=config.epochs, batch_sizes=update_sizes
                )
            else:
                phases = _measured_phases(r, traces, clients, sid)
            records.append(
                RoundRecord(sid, r, phases.total_ms, phases.train_ms, phases.agg_ms, phases.transport_ms, accuracy)
            )
            logging.info(f"📈 {config.name}: round {r} delay={phases.total_ms:.1f}ms accuracy={accuracy:.4f}")

        return ExperimentResult(
            config=config,
            records=records,
            global_models=global_models,
            global_weights=global_weights,
            client_models={c.client_id: c.get_model(sid) for c in clients},
            sample_counts={cid: len(shards[i]) for i, cid in enumerate(ids)},
            topologies=topologies,
        )
    finally:
        for c in clients:
            c.close()
        shutdown_runtime(rt)
        for b in brokers[1:]:
            b.shutdown()


def _measured_phases(round_no: int, traces: Dict[str, _ClientTrace], clients, session_id: str) -> PhaseBreakdown:
    starts = [t.started[round_no] for t in traces.values() if round_no in t.started]
    ends = [t.finished[round_no] for t in traces.values() if round_no in t.finished]
    total = max(1e-3, (max(ends) - min(starts)) * 1000.0) if starts and ends else 0.0
    train = max((t.train_ms.get(round_no, 0.0) for t in traces.values()), default=0.0)
    # Heads aggregate one after another up the tree; count the slowest per client.
    agg = sum(
        max((a.elapsed_ms for a in c.aggregations if a.session_id == session_id and a.round == round_no), default=0.0)
        for c in clients
    )
    agg = min(agg, max(0.0, total - train))
    return PhaseBreakdown(total, train, agg, max(0.0, total - train - agg))


# ----------------------------------------
# OUTPUT
# ----------------------------------------
def write_csv(records: Sequence[RoundRecord], path: Path | str) -> Path:
    """One row per round, then a summary row (mean delays, final accuracy)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())
        if records:
            w.writerow(
                {
                    "round": "summary",
                    "delay_ms": f"{np.mean([r.delay_ms for r in records]):.3f}",
                    "train_ms": f"{np.mean([r.train_ms for r in records]):.3f}",
                    "agg_ms": f"{np.mean([r.agg_ms for r in records]):.3f}",
                    "transport_ms": f"{np.mean([r.transport_ms for r in records]):.3f}",
                    "accuracy": f"{records[-1].accuracy:.6f}",
                }
            )
    return path


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    n_clients: int
    clustering: str
    rounds: int
    mean_delay_ms: float
    final_accuracy: float


def write_summary(rows: Sequence[SummaryRow], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(
                {
                    "scenario": row.scenario,
                    "n_clients": row.n_clients,
                    "clustering": row.clustering,
                    "rounds": row.rounds,
                    "mean_delay_ms": f"{row.mean_delay_ms:.3f}",
                    "final_accuracy": f"{row.final_accuracy:.6f}",
                }
            )
    return path


# ----------------------------------------
# TOPOLOGY COMPARISON
# ----------------------------------------
@dataclass
class TrendReport:
    rows: List[SummaryRow]
    delays: Dict[str, Dict[int, float]]
    gap: Dict[int, float]


def compare_topologies(
    base: ScenarioConfig,
    sizes: Sequence[int] = DEFAULT_SWEEP,
    topologies: Sequence[str] = DEFAULT_TOPOLOGIES,
    *,
    train: bool = False,
    out_dir: Optional[Path | str] = None,
) -> TrendReport:
    """
    Per-N round delay for each topology and the (first - second) gap series.

    With train=False only the delay model runs: topologies are built the way
    the coordinator builds them and accuracy is reported as NaN.
    """
    if len(topologies) != 2:
        raise ConfigurationError("compare_topologies needs exactly two topologies")
    if not train and base.latency is None:
        raise ConfigurationError("a delay-only comparison needs a latency model")

    rows: List[SummaryRow] = []
    delays: Dict[str, Dict[int, float]] = {t: {} for t in topologies}
    for n in sizes:
        for topo in topologies:
            cfg = base.model_copy(update={"n_clients": n, "clustering": topo, "name": f"{base.name}-{topo}-n{n}"})
            if train:
                result = run_experiment(cfg)
                if out_dir is not None:
                    write_csv(result.records, Path(out_dir) / f"{cfg.name}.csv")
                mean_delay, accuracy = result.mean_delay_ms, result.final_accuracy
            else:
                mean_delay, accuracy = _modelled_delay(cfg), float("nan")
            delays[topo][n] = mean_delay
            rows.append(SummaryRow(base.name, n, topo, cfg.fl_rounds, mean_delay, accuracy))

    first, second = topologies
    gap = {n: delays[first][n] - delays[second][n] for n in sizes}
    if out_dir is not None:
        write_summary(rows, Path(out_dir) / "summary.csv")
    for n in sizes:
        logging.info(f"N={n}: {first}={delays[first][n]:.1f}ms {second}={delays[second][n]:.1f}ms gap={gap[n]:.1f}ms")
    return TrendReport(rows, delays, gap)


def _modelled_delay(cfg: ScenarioConfig) -> float:
    ids = [f"client_{i:03d}" for i in range(cfg.n_clients)]
    members = {cid: cfg.preferred_roles.get(cid, DEFAULT_PREFERRED_ROLE) for cid in ids}
    topology = build_clusters(cfg.session_id, members, cfg.effective_clustering())
    data = parse_dataset_spec(cfg.dataset)
    params = init_params(cfg.model, data.n_features, data.n_classes, hidden=cfg.hidden, seed=cfg.seed)
    phases = simulate_round_delay(
        topology, 0, cfg.latency, epochs=cfg.epochs, batch_sizes=update_wire_sizes(params, cfg.session_id)
    )
    return phases.total_ms
