import csv
import json

import pytest
from typer.testing import CliRunner

from cli import app

runner = CliRunner()


def test_compare_writes_delay_trend(tmp_path):
    result = runner.invoke(app, ["compare", "--sizes", "5,10,20", "--rounds", "2", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "Per-round delay" in result.output
    with open(tmp_path / "summary.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [(r["n_clients"], r["clustering"]) for r in rows[:2]] == [("5", "single"), ("5", "hierarchical(3,0.3)")]
    assert {r["rounds"] for r in rows} == {"2"}


def test_compare_rejects_bad_sizes(tmp_path):
    result = runner.invoke(app, ["compare", "--sizes", "5,ten", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_coordinator_needs_a_broker():
    result = runner.invoke(app, ["coord", "--http-port", "0"])
    assert result.exit_code == 2


def test_client_rejects_bad_shard():
    result = runner.invoke(app, ["client", "--broker", "localhost", "--id", "c1", "--shard", "3/2"])
    assert result.exit_code == 2


@pytest.mark.slow
def test_experiment_command(tmp_path):
    config = tmp_path / "scenario.json"
    config.write_text(
        json.dumps(
            {
                "name": "cli-run",
                "n_clients": 3,
                "clustering": "single",
                "fl_rounds": 2,
                "epochs": 1,
                "dataset": "synthetic:classes=3,features=4,samples=300,seed=0",
            }
        ),
        encoding="utf-8",
    )
    result = runner.invoke(app, ["experiment", "--config", str(config), "--out", str(tmp_path / "out"), "--baseline"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "out" / "cli-run.csv").exists()
    assert "centralized accuracy" in result.output
