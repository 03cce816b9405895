from __future__ import annotations

import logging
import signal
from pathlib import Path
from typing import List, Optional

import typer
from rich.console import Console
from rich.table import Table

from app.config import (
    BROKER_PORT,
    CLUSTERING_POLICY,
    HTTP_PORT,
    OPTIMIZER_POLICY,
    PARAM_STORE_PATH,
    STRAGGLER_TIMEOUT_SECONDS,
)
from app.errors import SDFLMQError, TransportError
from app.logging_config import configure_logging

app = typer.Typer(help="Semi-decentralized federated learning over pub/sub.", no_args_is_help=True)
console = Console()


def _connect(broker: str, port: int, client_id: str):
    from app.mqtt_adapter import MqttBroker

    try:
        return MqttBroker(client_id, broker, port).connect()
    except TransportError as e:
        console.print(f"[red]❌ {e}[/red]")
        raise typer.Exit(code=1)


def _service_broker(broker: Optional[str], port: int, embedded: bool, client_id: str):
    if embedded:
        from app.transport import InMemoryBroker

        return InMemoryBroker("embedded")
    if not broker:
        raise typer.BadParameter("required unless --embedded is set", param_hint="--broker")
    return _connect(broker, port, client_id)


def _serve(rt, http_port: int) -> None:
    from app.runtime import shutdown_runtime, start_background, stop_event

    if http_port:
        import uvicorn

        from main import app as api

        # main's startup hook reuses the runtime built here and starts the tick loop
        uvicorn.run(api, host="0.0.0.0", port=http_port, log_level="info")
        return

    start_background(rt)
    signal.signal(signal.SIGTERM, lambda *_: stop_event.set())
    try:
        while not stop_event.wait(0.5):
            pass
    except KeyboardInterrupt:
        logging.info("Interrupted.")
    finally:
        shutdown_runtime(rt)


@app.command()
def coord(
    broker: Optional[str] = typer.Option(None, help="MQTT broker host"),
    port: int = typer.Option(BROKER_PORT, help="MQTT broker port"),
    embedded: bool = typer.Option(False, help="Run broker, coordinator and parameter server in this process"),
    clustering_policy: str = typer.Option(CLUSTERING_POLICY, help="single | hierarchical(layers,fraction)"),
    optimizer_policy: str = typer.Option(OPTIMIZER_POLICY, help="static | memory-greedy | round-robin | resource-score"),
    straggler_timeout: float = typer.Option(STRAGGLER_TIMEOUT_SECONDS, help="Seconds before a round is overdue"),
    http_port: int = typer.Option(HTTP_PORT, help="Status API port (0 disables it)"),
):
    """Run the session coordinator."""
    from app.runtime import init_runtime

    configure_logging()
    rt = init_runtime(
        _service_broker(broker, port, embedded, "sdflmq-coordinator"),
        with_param_server=embedded,
        clustering_policy=clustering_policy,
        optimizer_policy=optimizer_policy,
        straggler_timeout=straggler_timeout,
    )
    _serve(rt, http_port)


@app.command()
def paramserver(
    broker: Optional[str] = typer.Option(None, help="MQTT broker host"),
    port: int = typer.Option(BROKER_PORT, help="MQTT broker port"),
    store: Optional[Path] = typer.Option(PARAM_STORE_PATH, help="Append-only file for every global model"),
):
    """Run a standalone parameter server."""
    from app.runtime import init_runtime

    configure_logging()
    rt = init_runtime(
        _service_broker(broker, port, False, "sdflmq-paramserver"), with_coordinator=False, store_path=store
    )
    _serve(rt, 0)


@app.command()
def client(
    broker: str = typer.Option(..., help="MQTT broker host"),
    port: int = typer.Option(BROKER_PORT, help="MQTT broker port"),
    id: str = typer.Option(..., "--id", help="Client id"),
    session: str = typer.Option("session_01", help="Session id"),
    create: bool = typer.Option(False, help="Create the session instead of joining it"),
    capacity_min: int = typer.Option(1, help="Session capacity (with --create)"),
    capacity_max: int = typer.Option(1, help="Session capacity (with --create)"),
    rounds: int = typer.Option(2, help="FL rounds"),
    model_name: str = typer.Option("sdflmq-model", help="Model id shared by the session"),
    model: str = typer.Option("logreg", help="logreg | mlp"),
    role_preference: str = typer.Option("trainer", help="trainer | aggregator | trainer-aggregator"),
    dataset: str = typer.Option("synthetic:classes=10,features=20,samples=2000,seed=0", help="path | idx:a,b | mnist:dir | synthetic:..."),
    shard: str = typer.Option("0/1", help="Which shard of the dataset this client holds, as i/n"),
    epochs: int = typer.Option(5),
    lr: float = typer.Option(0.1),
    seed: int = typer.Option(0),
    timeout: float = typer.Option(STRAGGLER_TIMEOUT_SECONDS, help="Per-round wait"),
):
    """Run one federated client to the end of its session."""
    from app.client import SDFLClient
    from app.model_core import evaluate, init_params, parse_dataset_spec

    configure_logging()
    try:
        index, count = (int(x) for x in shard.split("/"))
    except ValueError:
        raise typer.BadParameter("expected i/n", param_hint="--shard")
    if not 0 <= index < count:
        raise typer.BadParameter("shard index out of range", param_hint="--shard")

    data = parse_dataset_spec(dataset).shards(count, seed=seed)[index]
    fl = SDFLClient(id, _connect(broker, port, id))
    try:
        if create:
            fl.create_fl_session(
                session,
                model_name=model_name,
                capacity_min=capacity_min,
                capacity_max=capacity_max,
                fl_rounds=rounds,
                preferred_role=role_preference,
            )
        else:
            fl.join_fl_session(session, model_name=model_name, fl_rounds=rounds, preferred_role=role_preference)
        fl.set_model(session, init_params(model, data.n_features, data.n_classes, seed=seed), n_samples=len(data))

        for _ in range(rounds):
            r = fl.wait_round_start(session, timeout=timeout)
            fl.train_round(session, data, epochs=epochs, learning_rate=lr, seed=seed + r)
            params = fl.wait_global_update(session, timeout=timeout)
            console.print(f"round {r}: local accuracy of global model = {evaluate(params, data):.4f}")
    except KeyboardInterrupt:
        fl.leave_session(session)
    except SDFLMQError as e:
        console.print(f"[red]❌ {type(e).__name__}: {e}[/red]")
        raise typer.Exit(code=1)
    finally:
        fl.close()
        fl.fleet.broker.shutdown()


@app.command()
def experiment(
    config: Path = typer.Option(..., exists=True, dir_okay=False, help="ScenarioConfig JSON"),
    out: Path = typer.Option(Path("results"), help="Output directory"),
    baseline: bool = typer.Option(False, help="Also train a centralized model on the pooled shards"),
):
    """Run one scenario and write <name>.csv plus summary.csv."""
    from app.harness import ScenarioConfig, SummaryRow, centralized_baseline, run_experiment, write_csv, write_summary

    configure_logging()
    cfg = ScenarioConfig.model_validate_json(config.read_text(encoding="utf-8"))
    result = run_experiment(cfg)
    path = write_csv(result.records, out / f"{cfg.name}.csv")
    write_summary(
        [SummaryRow(cfg.name, cfg.n_clients, cfg.clustering, cfg.fl_rounds, result.mean_delay_ms, result.final_accuracy)],
        out / "summary.csv",
    )

    table = Table(title=f"{cfg.name} ({cfg.n_clients} clients, {cfg.clustering})")
    for col in ("round", "delay_ms", "train_ms", "agg_ms", "transport_ms", "accuracy"):
        table.add_column(col, justify="right")
    for r in result.records:
        table.add_row(*(str(v) for v in r.row().values()))
    console.print(table)
    if baseline:
        console.print(f"centralized accuracy: {centralized_baseline(cfg):.4f}")
    console.print(f"✅ wrote {path}")


@app.command()
def compare(
    config: Optional[Path] = typer.Option(None, exists=True, dir_okay=False, help="Base ScenarioConfig JSON"),
    sizes: str = typer.Option("5,10,20,40", help="Comma-separated client counts"),
    rounds: int = typer.Option(10),
    train: bool = typer.Option(False, help="Run full sessions instead of the delay model only"),
    out: Path = typer.Option(Path("results"), help="Output directory"),
):
    """Compare single vs hierarchical(3,0.3) round delay across client counts."""
    from app.harness import LatencyConfig, ScenarioConfig, compare_topologies

    configure_logging()
    if config is not None:
        base = ScenarioConfig.model_validate_json(config.read_text(encoding="utf-8"))
    else:
        base = ScenarioConfig(name="compare", epochs=1, latency=LatencyConfig(per_message_ms=5.0, per_byte_ns=10.0))
    if base.latency is None and not train:
        base = base.model_copy(update={"latency": LatencyConfig(per_message_ms=5.0, per_byte_ns=10.0)})
    base = base.model_copy(update={"fl_rounds": rounds})

    try:
        ns: List[int] = [int(s) for s in sizes.split(",") if s.strip()]
    except ValueError:
        raise typer.BadParameter("expected integers", param_hint="--sizes")

    report = compare_topologies(base, ns, train=train, out_dir=out)
    first, second = list(report.delays)
    table = Table(title="Per-round delay (ms)")
    for col in ("N", first, second, "gap"):
        table.add_column(col, justify="right")
    for n in ns:
        table.add_row(str(n), f"{report.delays[first][n]:.1f}", f"{report.delays[second][n]:.1f}", f"{report.gap[n]:.1f}")
    console.print(table)


if __name__ == "__main__":
    app()
