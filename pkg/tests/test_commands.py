#
# test_commands.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

import csv
import json
from io import StringIO
from pathlib import Path

import numpy as np
import pytest
from django.core.management import CommandError, call_command

from django_ggnn.exceptions import ConfigError
from django_ggnn.ggnn import named_arrays, with_arrays
from django_ggnn.models import GGNNController
from django_ggnn.runs import EVAL_FIELDS, RunConfig

pytestmark = pytest.mark.django_db(transaction=True)

SHORT = ("--horizon", "0.05", "--team-sizes", "3")
SMALL_NET = ("--state-features", "3", "--filter-taps", "1", "--hidden-width", "4")


def run(*args: str) -> str:
    out = StringIO()
    call_command("ggnn", *args, stdout=out)
    return out.getvalue()


def gen_data(directory: Path, seed: int = 4) -> Path:
    run(
        "gen-data", "--count", "3", "--seed", str(seed), "--out", str(directory), *SHORT
    )
    return directory


def write_weights(path: Path, net, scale: float) -> Path:
    arrays = {name: value * scale for name, value in named_arrays(net).items()}
    path.write_text(json.dumps(with_arrays(net, arrays).to_dict()))
    return path


def test_gen_data(tmp_path) -> None:
    output = run(
        "gen-data", "--count", "3", "--seed", "4", "--out", str(tmp_path), *SHORT
    )
    assert "Wrote 3 trajectories" in output
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["splits"] == {"train": 2, "validation": 0, "test": 1}
    assert len(list((tmp_path / "trajectories").glob("*.json"))) == 3
    for entry in manifest["trajectories"]:
        assert entry["n_agents"] == 3
        assert entry["steps"] == 5
    config = json.loads((tmp_path / "config.json").read_text())
    assert config["seed"] == 4
    assert config["horizon"] == 0.05


def test_gen_data_is_reproducible(tmp_path) -> None:
    first = gen_data(tmp_path / "first")
    second = gen_data(tmp_path / "second")
    assert (first / "manifest.json").read_text() == (
        second / "manifest.json"
    ).read_text()
    for path in (first / "trajectories").iterdir():
        assert path.read_text() == (second / "trajectories" / path.name).read_text()


def test_train_without_epochs_registers_controller(tmp_path) -> None:
    data = gen_data(tmp_path / "data")
    out = tmp_path / "train"
    output = run(
        "train",
        "--data",
        str(data),
        "--out",
        str(out),
        "--epochs",
        "0",
        "--register",
        "square-swarm",
        *SMALL_NET,
    )
    assert "Registered controller square-swarm." in output
    assert "Trained for 0 epochs" in output
    assert (out / "report.jsonl").read_text() == ""
    weights = json.loads((out / "weights.json").read_text())
    controller = GGNNController.objects.get(name="square-swarm")
    assert controller.weights == weights
    assert controller.certificate == json.loads(
        (out / "certificate.json").read_text()
    )
    assert controller.report == []


def test_train_one_epoch(tmp_path) -> None:
    data = gen_data(tmp_path / "data")
    out = tmp_path / "train"
    run(
        "train",
        "--data",
        str(data),
        "--out",
        str(out),
        "--epochs",
        "1",
        "--dagger-interval",
        "0",
        "--no-stable",
        *SMALL_NET,
        *SHORT,
    )
    records = [
        json.loads(line) for line in (out / "report.jsonl").read_text().splitlines()
    ]
    assert len(records) == 1
    assert records[0]["epoch"] == 1
    assert records[0]["train_samples"] == 2
    assert json.loads((out / "config.json").read_text())["stable"] is False


def test_train_updates_registered_controller(tmp_path, controller) -> None:
    data = gen_data(tmp_path / "data")
    output = run(
        "train",
        "--data",
        str(data),
        "--out",
        str(tmp_path / "train"),
        "--epochs",
        "0",
        "--register",
        controller.name,
        *SMALL_NET,
    )
    assert f"Updated controller {controller.name}." in output
    controller.refresh_from_db()
    assert controller.network.k_order == 1
    assert controller.certificate is not None


def test_train_without_dataset(tmp_path) -> None:
    with pytest.raises(CommandError) as excinfo:
        run("train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path))
    assert excinfo.value.returncode == 2


def test_certify_stable_weights(tmp_path, small_net) -> None:
    weights = write_weights(tmp_path / "zero.json", small_net, 0.0)
    output = run("certify", "--weights", str(weights), "--out", str(tmp_path / "c"))
    assert "Certified incrementally stable." in output
    certificate = json.loads((tmp_path / "c" / "certificate.json").read_text())
    assert certificate["verdict_diss"] is True
    assert certificate["s_bar"] == 2.0


def test_certify_unstable_weights(tmp_path, small_net) -> None:
    weights = write_weights(tmp_path / "large.json", small_net, 100.0)
    with pytest.raises(CommandError) as excinfo:
        run("certify", "--weights", str(weights), "--out", str(tmp_path / "c"))
    assert excinfo.value.returncode == 1
    assert "failing layers: 0" in str(excinfo.value)
    assert (tmp_path / "c" / "certificate.json").exists()


def test_certify_with_explicit_bounds(tmp_path, small_net) -> None:
    weights = write_weights(tmp_path / "zero.json", small_net, 0.0)
    run(
        "certify",
        "--weights",
        str(weights),
        "--out",
        str(tmp_path),
        "--s-bar",
        "3",
        "--s-k-bar",
        "4",
    )
    certificate = json.loads((tmp_path / "certificate.json").read_text())
    assert (certificate["s_bar"], certificate["s_K_bar"]) == (3.0, 4.0)


@pytest.mark.parametrize(
    "contents",
    [None, "not json", '{"format": "ggnn-weights"}'],
    ids=["missing", "malformed", "incomplete"],
)
def test_certify_bad_weights(tmp_path, contents) -> None:
    path = tmp_path / "weights.json"
    if contents is not None:
        path.write_text(contents)
    with pytest.raises(CommandError) as excinfo:
        run("certify", "--weights", str(path), "--out", str(tmp_path))
    assert excinfo.value.returncode == 2


def test_eval_grid(tmp_path) -> None:
    output = run(
        "eval",
        "--policy",
        "zero",
        "--eval-team-sizes",
        "3",
        "--eval-radii",
        "2.0",
        "4.0",
        "--eval-delays",
        "0",
        "2",
        "--eval-rollouts",
        "2",
        "--horizon",
        "0.05",
        "--out",
        str(tmp_path),
    )
    assert "Wrote 4 evaluation cells." in output
    with (tmp_path / "eval.csv").open(newline="") as handle:
        reader = csv.DictReader(handle)
        rows = list(reader)
        assert tuple(reader.fieldnames) == EVAL_FIELDS
    assert len(rows) == 4
    assert {(row["comm_radius"], row["comm_delay"]) for row in rows} == {
        ("2.0", "0"),
        ("2.0", "2"),
        ("4.0", "0"),
        ("4.0", "2"),
    }
    assert all(row["rollouts"] == "2" for row in rows)


def test_eval_rejects_long_network_delays(tmp_path, small_net) -> None:
    weights = write_weights(tmp_path / "w.json", small_net, 1.0)
    with pytest.raises(CommandError) as excinfo:
        run(
            "eval",
            "--weights",
            str(weights),
            "--eval-delays",
            "2",
            "--out",
            str(tmp_path),
        )
    assert excinfo.value.returncode == 2


def test_simulate_expert(tmp_path) -> None:
    output = run(
        "simulate",
        "--policy",
        "expert",
        "--agents",
        "3",
        "--horizon",
        "0.05",
        "--seed",
        "1",
        "--out",
        str(tmp_path),
    )
    assert "Simulated 5 steps" in output
    lines = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "t,agent,rx,ry,vx,vy,ux,uy,cost"
    assert len(lines) == 1 + 6 * 3
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["policy"] == "expert"
    assert summary["steps"] == 5
    assert summary["n_agents"] == 3


def test_simulate_network_with_delay(tmp_path, small_net) -> None:
    weights = write_weights(tmp_path / "w.json", small_net, 1.0)
    run(
        "simulate",
        "--weights",
        str(weights),
        "--agents",
        "4",
        "--comm-delay",
        "1",
        "--horizon",
        "0.03",
        "--out",
        str(tmp_path / "sim"),
    )
    summary = json.loads((tmp_path / "sim" / "summary.json").read_text())
    assert summary["policy"] == "network"
    assert summary["comm_delay"] == 1
    rows = (tmp_path / "sim" / "trajectory.csv").read_text().splitlines()
    assert np.isfinite(float(rows[1].split(",")[6]))


def test_config_file_is_layered(tmp_path) -> None:
    config_file = tmp_path / "run.json"
    config_file.write_text(json.dumps({"count": 2, "seed": 9, "horizon": 0.03}))
    run(
        "gen-data",
        "--config",
        str(config_file),
        "--seed",
        "11",
        "--team-sizes",
        "2",
        "--out",
        str(tmp_path / "data"),
    )
    config = json.loads((tmp_path / "data" / "config.json").read_text())
    assert (config["count"], config["seed"], config["horizon"]) == (2, 11, 0.03)
    assert config["team_sizes"] == [2]


@pytest.mark.parametrize(
    "document",
    [
        {"bogus": 1},
        {"support_kind": "incidence"},
        {"count": -1},
        {"filter_taps": -1},
        ["count"],
    ],
)
def test_bad_config_file(tmp_path, document) -> None:
    config_file = tmp_path / "run.json"
    config_file.write_text(json.dumps(document))
    with pytest.raises(CommandError) as excinfo:
        run("gen-data", "--config", str(config_file), "--out", str(tmp_path))
    assert excinfo.value.returncode == 2


def test_run_config_defaults_follow_settings() -> None:
    config = RunConfig()
    assert config.state_features == 8
    assert config.dt == 0.01
    assert config.support_kind == "normalized_laplacian"
    assert config.squared_threshold is False


def test_run_config_accepts_memoryless_filters() -> None:
    assert RunConfig.resolve(overrides={"filter_taps": 0}).filter_taps == 0
    with pytest.raises(ConfigError):
        RunConfig.resolve(overrides={"filter_taps": -1})


def test_train_with_memoryless_filters(tmp_path) -> None:
    data = gen_data(tmp_path / "data")
    out = tmp_path / "train"
    run(
        "train",
        "--data",
        str(data),
        "--out",
        str(out),
        "--epochs",
        "0",
        "--state-features",
        "3",
        "--filter-taps",
        "0",
        "--hidden-width",
        "4",
    )
    weights = json.loads((out / "weights.json").read_text())
    certificate = json.loads((out / "certificate.json").read_text())
    assert certificate["s_K_bar"] == 1.0
    assert weights
