import numpy as np
import pytest

from app.harness import LatencyConfig, ScenarioConfig, centralized_baseline, run_experiment
from app.model_core import WeightedUpdate, fedavg

pytestmark = pytest.mark.slow


def _check_consistent(result):
    cfg = result.config
    assert [r.round for r in result.records] == list(range(1, cfg.fl_rounds + 1))
    assert sorted(result.global_models) == list(range(1, cfg.fl_rounds + 1))
    total = float(sum(result.sample_counts.values()))
    assert all(w == pytest.approx(total) for w in result.global_weights.values())
    final = result.global_models[cfg.fl_rounds]
    assert all(m == final for m in result.client_models.values())
    assert all(r.delay_ms > 0 for r in result.records)
    assert all(r.train_ms + r.agg_ms <= r.delay_ms + 1e-6 for r in result.records)


def test_single_aggregator_session():
    result = run_experiment(
        ScenarioConfig(
            name="single-4",
            n_clients=4,
            clustering="single",
            fl_rounds=2,
            epochs=2,
            dataset="synthetic:classes=4,features=6,samples=800,seed=0",
        )
    )
    _check_consistent(result)
    assert result.final_accuracy >= 0.8


def test_hierarchical_session_across_bridged_brokers():
    result = run_experiment(
        ScenarioConfig(
            name="hier-10",
            n_clients=10,
            clustering="hierarchical(3,0.3)",
            fl_rounds=3,
            epochs=2,
            bridged=True,
            dataset="synthetic:classes=5,features=8,samples=2000,seed=1",
        )
    )
    _check_consistent(result)
    topo = result.topologies[1]
    assert len(topo.heads()) == 3
    assert len(topo.layers) == 3


def test_first_round_matches_flat_fedavg_of_trained_shards():
    """A global model must equal one flat weighted average over every client's update."""
    from app.harness import _initial_params, prepare_data
    from app.model_core import train_local

    cfg = ScenarioConfig(
        name="exact",
        n_clients=6,
        clustering="hierarchical(3,0.5)",
        fl_rounds=1,
        epochs=1,
        dataset="synthetic:classes=3,features=4,samples=600,seed=2",
    )
    result = run_experiment(cfg)
    shards, _ = prepare_data(cfg)
    init = _initial_params(cfg, shards)
    updates = [
        WeightedUpdate(
            train_local(init, shard, cfg.epochs, cfg.learning_rate, cfg.seed * 7919 + i * 101 + 1, batch_size=cfg.batch_size).params,
            float(len(shard)),
        )
        for i, shard in enumerate(shards)
    ]
    expected = fedavg(updates)
    for name, arr in expected.items():
        np.testing.assert_allclose(result.global_models[1][name], arr, rtol=1e-6, atol=1e-6)


def test_latency_model_drives_reported_delay():
    result = run_experiment(
        ScenarioConfig(
            name="modelled",
            n_clients=5,
            clustering="single",
            fl_rounds=2,
            epochs=1,
            dataset="synthetic:classes=3,features=4,samples=500,seed=0",
            latency=LatencyConfig(per_message_ms=5.0, per_byte_ns=10.0),
        )
    )
    delays = [r.delay_ms for r in result.records]
    assert delays[0] == pytest.approx(delays[1])
    assert delays[0] > 5.0 * 6


def test_federated_accuracy_close_to_centralized():
    cfg = ScenarioConfig(
        name="accuracy",
        n_clients=5,
        clustering="single",
        fl_rounds=10,
        epochs=5,
        client_fraction=0.01,
        dataset="synthetic:classes=10,features=20,samples=20000,seed=0",
    )
    result = run_experiment(cfg)
    central = centralized_baseline(cfg)
    assert abs(result.final_accuracy - central) <= 0.05
    assert result.records[-1].accuracy >= result.records[0].accuracy - 0.05
