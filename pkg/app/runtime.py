from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from app import topics
from app.config import (
    CLUSTERING_POLICY,
    OPTIMIZER_POLICY,
    PARAM_STORE_PATH,
    STRAGGLER_TIMEOUT_SECONDS,
    TICK_INTERVAL_SECONDS,
)
from app.coordinator import Coordinator
from app.fleet_control import FleetEndpoint
from app.param_server import SERVER_ID, ParamServer
from app.transport import Broker, InMemoryBroker

# Global state for the service process
stop_event = threading.Event()
_runtime: Optional["Runtime"] = None


@dataclass
class Runtime:
    broker: Broker
    coordinator: Optional[Coordinator] = None
    param_server: Optional[ParamServer] = None
    endpoints: List[FleetEndpoint] = field(default_factory=list)
    threads: List[threading.Thread] = field(default_factory=list)


def init_runtime(
    broker: Optional[Broker] = None,
    *,
    with_coordinator: bool = True,
    with_param_server: bool = True,
    clustering_policy: str = CLUSTERING_POLICY,
    optimizer_policy: str = OPTIMIZER_POLICY,
    straggler_timeout: float = STRAGGLER_TIMEOUT_SECONDS,
    store_path: Optional[Path] = PARAM_STORE_PATH,
) -> Runtime:
    """
    Build the service side of a deployment on `broker` (a fresh in-memory
    broker when none is given). Called once at startup.
    """
    global _runtime
    stop_event.clear()
    rt = Runtime(broker=broker or InMemoryBroker("embedded"))

    if with_coordinator:
        fleet = FleetEndpoint("coordinator", rt.broker, topics.COORD_TOPIC)
        rt.endpoints.append(fleet)
        rt.coordinator = Coordinator(
            fleet,
            clustering_policy=clustering_policy,
            optimizer_policy=optimizer_policy,
            straggler_timeout=straggler_timeout,
        ).bind()

    if with_param_server:
        fleet = FleetEndpoint(SERVER_ID, rt.broker, f"{topics.ROOT}/{SERVER_ID}")
        rt.endpoints.append(fleet)
        rt.param_server = ParamServer(fleet, store_path=store_path).bind()

    _runtime = rt
    logging.info(
        f"Runtime ready on {rt.broker.broker_id} "
        f"(coordinator={'on' if rt.coordinator else 'off'}, paramserver={'on' if rt.param_server else 'off'})"
    )
    return rt


def get_runtime() -> Optional[Runtime]:
    """
    Accessor so other modules don't rely directly on the global name.
    """
    return _runtime


def coordinator_tick_loop(coordinator: Coordinator, interval: float = TICK_INTERVAL_SECONDS) -> None:
    """
    Background thread:
    - advances session timers (waiting_time, session_time, straggler deadlines)
    - exits as soon as stop_event is set
    """
    logging.info("Coordinator tick loop started.")
    while not stop_event.wait(interval):
        try:
            for event in coordinator.tick():
                logging.debug(f"tick: {event}")
        except Exception as e:
            logging.exception(f"Coordinator tick failed: {e}")
    logging.info("Coordinator tick loop stopped.")


def start_background(rt: Runtime, interval: float = TICK_INTERVAL_SECONDS) -> None:
    if rt.coordinator is None:
        return
    t = threading.Thread(
        target=coordinator_tick_loop, args=(rt.coordinator, interval), name="coord-tick", daemon=True
    )
    t.start()
    rt.threads.append(t)


def shutdown_runtime(rt: Optional[Runtime] = None) -> None:
    """
    Stop the tick loop, terminate live sessions and release the broker.
    """
    global _runtime
    rt = rt or _runtime
    stop_event.set()
    if rt is None:
        return

    for t in rt.threads:
        t.join(timeout=5)

    if rt.coordinator is not None:
        try:
            rt.coordinator.shutdown()
        except Exception as e:
            logging.warning(f"Error terminating sessions: {e}")

    if isinstance(rt.broker, InMemoryBroker):
        rt.broker.flush(timeout=2)
    for fleet in rt.endpoints:
        fleet.close()
    rt.broker.shutdown()

    if _runtime is rt:
        _runtime = None
    logging.info("Runtime shut down.")
