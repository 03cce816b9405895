from __future__ import annotations

import threading
import time
from typing import Callable, List, Tuple

import numpy as np
import pytest

from app.fleet_control import FleetEndpoint
from app.model_core import ModelParameters, make_synthetic
from app.transport import InMemoryBroker


class MockClock:
    def __init__(self, start: float = 1000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> float:
        self.now += seconds
        return self.now


class Recorder:
    """Handler that records (sender, payload) and lets tests wait for n calls."""

    def __init__(self):
        self.calls: List[Tuple[str, bytes]] = []
        self._cond = threading.Condition()

    def __call__(self, sender: str, payload: bytes) -> None:
        with self._cond:
            self.calls.append((sender, payload))
            self._cond.notify_all()

    def wait_for(self, n: int, timeout: float = 5.0) -> bool:
        deadline = time.monotonic() + timeout
        with self._cond:
            while len(self.calls) < n:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)
        return True


@pytest.fixture
def clock() -> MockClock:
    return MockClock()


@pytest.fixture
def broker():
    b = InMemoryBroker("test")
    yield b
    b.shutdown()


@pytest.fixture
def make_broker():
    made: List[InMemoryBroker] = []

    def factory(name: str, **kwargs) -> InMemoryBroker:
        b = InMemoryBroker(name, **kwargs)
        made.append(b)
        return b

    yield factory
    for b in made:
        b.shutdown()


@pytest.fixture
def endpoint(broker) -> Callable[..., FleetEndpoint]:
    made: List[FleetEndpoint] = []

    def factory(endpoint_id: str, base_topic: str, **kwargs) -> FleetEndpoint:
        e = FleetEndpoint(endpoint_id, broker, base_topic, **kwargs)
        made.append(e)
        return e

    yield factory
    for e in made:
        e.close()


@pytest.fixture
def recorder() -> Recorder:
    return Recorder()


@pytest.fixture(scope="session")
def blobs():
    return make_synthetic(n_classes=4, n_features=6, n_samples=400, seed=3)


def random_params(rng: np.random.Generator, shapes=None) -> ModelParameters:
    shapes = shapes or {"W": (6, 4), "b": (4,)}
    return ModelParameters({k: rng.normal(size=s).astype(np.float32) for k, s in shapes.items()})
