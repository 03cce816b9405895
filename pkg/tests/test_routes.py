import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.model_core import ModelParameters, deserialize_params
from app.runtime import init_runtime, shutdown_runtime
from app.schemas import CreateSessionRequest, JoinSessionRequest
from main import app


@pytest.fixture
def runtime(broker):
    rt = init_runtime(broker, store_path=None)
    yield rt
    shutdown_runtime(rt)


@pytest.fixture
def api(runtime):
    # no context manager: startup hooks would build a second runtime thread
    return TestClient(app)


def _open_session(rt, session_id="s1", members=2):
    rt.coordinator.create_session(
        CreateSessionRequest(
            client_id="c0", session_id=session_id, model_name="logreg", capacity_min=members, capacity_max=members, fl_rounds=3
        )
    )
    for i in range(1, members):
        rt.coordinator.join_session(JoinSessionRequest(client_id=f"c{i}", session_id=session_id, model_name="logreg"))


def test_health(api):
    r = api.get("/health")
    assert r.status_code == 200
    assert r.json() == {"ok": True, "broker": "test"}


def test_sessions_listing_and_detail(api, runtime):
    _open_session(runtime, "s1", members=2)
    _open_session(runtime, "s2", members=3)
    runtime.coordinator.create_session(CreateSessionRequest(client_id="x", session_id="s3", model_name="m", capacity_max=4))

    r = api.get("/sessions")
    assert r.status_code == 200
    assert [s["session_id"] for s in r.json()] == ["s1", "s2", "s3"]
    assert [s["session_id"] for s in api.get("/sessions", params={"state": "WAITING"}).json()] == ["s3"]

    detail = api.get("/sessions/s2").json()
    assert detail["members"] == ["c0", "c1", "c2"]
    assert detail["fl_rounds_max"] == 3
    assert detail["topology_version"] == 1
    assert api.get("/sessions/nope").status_code == 404


def test_topology_endpoint(api, runtime):
    runtime.coordinator.create_session(CreateSessionRequest(client_id="x", session_id="early", model_name="m", capacity_max=4))
    assert api.get("/sessions/early/topology").status_code == 404

    _open_session(runtime, "s1", members=2)
    topo = api.get("/sessions/s1/topology").json()
    assert topo["root"] in ("c0", "c1")
    assert sorted(n["client_id"] for n in topo["nodes"]) == ["c0", "c1"]


def test_global_model_endpoints(api, runtime):
    params = ModelParameters({"W": np.arange(6, dtype=np.float32).reshape(3, 2), "b": np.ones(2, dtype=np.float32)})
    runtime.param_server.on_root_result("s1", 1, params, weight=12.0)
    runtime.param_server.on_root_result("s1", 2, params, weight=13.0)

    latest = api.get("/global/s1").json()
    assert (latest["round"], latest["weight"]) == (2, 13.0)
    assert latest["tensor_shapes"] == {"W": [3, 2], "b": [2]}
    assert deserialize_params(base64.b64decode(latest["blob_b64"])) == params

    assert api.get("/global/s1/1").json()["weight"] == 12.0
    assert api.get("/global/s1/7").status_code == 404
    assert api.get("/global/unknown").status_code == 404


def test_service_unavailable_without_runtime(broker):
    rt = init_runtime(broker, with_coordinator=False, with_param_server=False)
    try:
        api = TestClient(app)
        assert api.get("/sessions").status_code == 503
        assert api.get("/global/s1").status_code == 503
    finally:
        shutdown_runtime(rt)
