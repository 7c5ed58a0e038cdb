#
# runs.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Reproducible runs: dataset generation, training, certification, evaluation
and single rollouts.

Each run resolves a `RunConfig`, writes it to `<out>/config.json` and leaves
only JSON and CSV artifacts behind. Everything random derives from the
configured seed.
"""

import asyncio
import csv
import itertools
import json
import logging
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from pathlib import Path
from typing import Any

import numpy as np
from asgiref.sync import async_to_sync, sync_to_async

from django_ggnn import conf
from django_ggnn.exceptions import (
    ConfigError,
    DegenerateScenarioError,
    TrainingDivergedError,
    WeightsFormatError,
)
from django_ggnn.flocking import (
    FAILURE_REASONS,
    TRAJECTORY_FIELDS,
    ExpertPolicy,
    NetworkPolicy,
    Policy,
    Trajectory,
    ZeroPolicy,
    leader_error,
    rollout,
    sample_scenario,
)
from django_ggnn.ggnn import NetworkParams, init_network
from django_ggnn.graph import default_support_bound, stacked_shift_norm_bound
from django_ggnn.learn import (
    Dataset,
    Sample,
    TrainingConfig,
    TrainingResult,
    assign_splits,
    run_rollouts,
    train,
)
from django_ggnn.stability import RegularizerConfig, StabilityCertificate, certify

logger = logging.getLogger(__name__)

POLICIES = ("network", "expert", "zero")
STATISTICS = ("mean", "median", "p25", "p75", "min", "max")
EVAL_FIELDS = (
    "policy",
    "n_agents",
    "comm_radius",
    "comm_delay",
    "rollouts",
    *(f"cost_{name}" for name in STATISTICS),
    *(f"leader_error_{name}" for name in STATISTICS),
    "failure_rate",
    *(f"failures_{reason}" for reason in FAILURE_REASONS),
)


@dataclass
class RunConfig:
    """Every parameter of a run.

    Values come from the settings defaults, then a JSON config file, then
    explicit command line flags.
    """

    seed: int = 0
    out: str = "ggnn-run"
    data: str | None = None
    weights: str | None = None
    register: str | None = None
    # scenarios
    count: int = 120
    team_sizes: list[int] = field(default_factory=lambda: [4, 6, 10, 12, 15])
    agents: int = 4
    comm_radius: float = 4.0
    sensing_radius: float = 1.0
    horizon: float = 2.5
    dt: float = field(default_factory=conf.get_sampling_time)
    saturation: float = field(default_factory=conf.get_control_saturation)
    leader_gain: float = 0.5
    max_degree: int | None = None
    comm_delay: int = 0
    squared_threshold: bool = field(default_factory=conf.get_ca_squared_threshold)
    # network
    support_kind: str = field(default_factory=conf.get_support_kind)
    state_features: int = field(default_factory=conf.get_state_features)
    filter_taps: int = field(default_factory=conf.get_filter_taps)
    layers: int = field(default_factory=conf.get_layers)
    hidden_width: int = field(default_factory=conf.get_hidden_width)
    # training
    epochs: int = 120
    batch_size: int = 8
    dagger_interval: int = 20
    dagger_rollouts: int = 4
    bptt_window: int | None = None
    stable: bool = True
    learning_rate: float = field(default_factory=conf.get_learning_rate)
    rho_plus: float = field(default_factory=conf.get_rho_plus)
    rho_minus: float = field(default_factory=conf.get_rho_minus)
    epsilon: float = field(default_factory=conf.get_epsilon)
    # certification
    s_bar: float | None = None
    s_K_bar: float | None = None
    n_agents: int | None = None
    # evaluation
    policy: str = "network"
    eval_team_sizes: list[int] = field(default_factory=lambda: [4])
    eval_radii: list[float] = field(default_factory=lambda: [4.0])
    eval_delays: list[int] = field(default_factory=lambda: [0])
    eval_rollouts: int = 40

    def __post_init__(self) -> None:
        if self.support_kind not in conf.SUPPORT_KINDS:
            msg = (
                f"Unknown support kind {self.support_kind!r}; "
                f"expected one of {', '.join(conf.SUPPORT_KINDS)}."
            )
            raise ConfigError(msg)
        if self.policy not in POLICIES:
            msg = f"Unknown policy {self.policy!r}; expected one of {POLICIES}."
            raise ConfigError(msg)
        for name in ("count", "epochs", "eval_rollouts", "comm_delay", "filter_taps"):
            if getattr(self, name) < 0:
                msg = f"{name} must be nonnegative, got {getattr(self, name)}."
                raise ConfigError(msg)
        for name in ("agents", "batch_size", "layers"):
            if getattr(self, name) < 1:
                msg = f"{name} must be positive, got {getattr(self, name)}."
                raise ConfigError(msg)
        for name in ("team_sizes", "eval_team_sizes", "eval_radii", "eval_delays"):
            if not getattr(self, name):
                msg = f"{name} must not be empty."
                raise ConfigError(msg)
        if min(self.team_sizes) < 1 or min(self.eval_team_sizes) < 1:
            msg = "Team sizes must be positive."
            raise ConfigError(msg)
        if min(self.eval_delays) < 0:
            msg = "Communication delays must be nonnegative."
            raise ConfigError(msg)
        if self.policy == "network" and max(
            [*self.eval_delays, self.comm_delay]
        ) > 1:
            msg = "Network policies only run with delays of zero or one step."
            raise ConfigError(msg)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def resolve(
        cls,
        config_file: str | Path | None = None,
        overrides: Mapping[str, Any] | None = None,
    ) -> "RunConfig":
        """Layer a JSON config file and explicit overrides over the defaults.
        Overrides set to None are ignored.

        Raises:
            ConfigError: If the file cannot be read or holds unknown keys.
        """
        values: dict[str, Any] = {}
        if config_file is not None:
            path = Path(config_file)
            try:
                document = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as err:
                msg = f"Cannot read config file {path}: {err}"
                raise ConfigError(msg) from err
            if not isinstance(document, dict):
                msg = f"Config file {path} must hold a JSON object."
                raise ConfigError(msg)
            values.update(document)
        values.update(
            {
                key: value
                for key, value in (overrides or {}).items()
                if value is not None
            }
        )
        unknown = sorted(set(values) - cls.field_names())
        if unknown:
            msg = f"Unknown config keys: {', '.join(unknown)}."
            raise ConfigError(msg)
        try:
            return cls(**values)
        except TypeError as err:
            msg = f"Invalid config: {err}"
            raise ConfigError(msg) from err

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def output_dir(self) -> Path:
        """Create the output directory and record the resolved config in it.

        Raises:
            ConfigError: If the directory cannot be written.
        """
        out = Path(self.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / "config.json", self.to_dict())
        except OSError as err:
            msg = f"Cannot write to {out}: {err}"
            raise ConfigError(msg) from err
        return out

    def scenario_options(self) -> dict[str, Any]:
        return {
            "comm_radius": self.comm_radius,
            "sensing_radius": self.sensing_radius,
            "horizon": self.horizon,
            "dt": self.dt,
            "saturation": self.saturation,
            "leader_gain": self.leader_gain,
            "max_degree": self.max_degree,
        }

    def support_bounds(self, net: NetworkParams) -> tuple[float, float]:
        """(s̄, s̄_K) for `net`; unset bounds follow the support kind and the
        largest team."""
        s_bar = self.s_bar
        if s_bar is None:
            n_agents = self.n_agents or max(self.team_sizes)
            s_bar = default_support_bound(net.support_kind, n_agents)
        s_K_bar = self.s_K_bar
        if s_K_bar is None:
            s_K_bar = stacked_shift_norm_bound(s_bar, net.k_order)
        return s_bar, s_K_bar


def write_json(path: Path, document: Any) -> None:
    path.write_text(
        json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def write_csv(path: Path, fieldnames: tuple[str, ...], rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def load_weights(path: str | Path | None) -> NetworkParams:
    """Read a weights document.

    Raises:
        ConfigError: If no path is given or the file is missing.
        WeightsFormatError: If the file is not a valid weights document.
    """
    if path is None:
        msg = "A weights file is required."
        raise ConfigError(msg)
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        msg = f"Cannot read weights file {path}: {err}"
        raise ConfigError(msg) from err
    try:
        document = json.loads(text)
    except json.JSONDecodeError as err:
        msg = f"Malformed weights file {path}: {err}"
        raise WeightsFormatError(msg) from err
    if not isinstance(document, dict):
        msg = f"Malformed weights file {path}: expected a JSON object."
        raise WeightsFormatError(msg)
    return NetworkParams.from_dict(document)


def load_dataset(directory: str | Path) -> Dataset:
    """Read the trajectories listed in a dataset manifest.

    Raises:
        ConfigError: If the manifest or one of its files is missing.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        samples = [
            Sample.from_dict(
                json.loads((directory / entry["file"]).read_text(encoding="utf-8"))
            )
            for entry in manifest["trajectories"]
        ]
    except (OSError, KeyError, json.JSONDecodeError) as err:
        msg = f"Missing or unreadable dataset in {directory}: {err}"
        raise ConfigError(msg) from err
    return Dataset(samples=samples)


def cmd_gen_data(config: RunConfig) -> dict[str, Any]:
    """Record expert rollouts over sampled scenarios and split them 70/10/20.

    Writes `trajectories/NNN.json` and `manifest.json` under the output directory
    and returns the manifest.
    """
    out = config.output_dir()
    rng = np.random.default_rng(config.seed)
    scenarios = [
        sample_scenario(
            rng, int(rng.choice(config.team_sizes)), **config.scenario_options()
        )
        for _ in range(config.count)
    ]
    trajectories = run_rollouts(
        partial(ExpertPolicy, squared_threshold=config.squared_threshold),
        scenarios,
        squared_threshold=config.squared_threshold,
    )
    samples = [Sample.from_trajectory(trajectory) for trajectory in trajectories]
    assign_splits(samples, rng)
    directory = out / "trajectories"
    directory.mkdir(exist_ok=True)
    entries = []
    for index, (sample, trajectory) in enumerate(
        zip(samples, trajectories, strict=True)
    ):
        name = f"trajectories/{index:03d}.json"
        write_json(out / name, sample.to_dict())
        entries.append(
            {
                "file": name,
                "split": sample.split,
                "n_agents": sample.n_agents,
                "steps": sample.horizon,
                "failure_reason": trajectory.failure_reason,
            }
        )
    manifest = {
        "seed": config.seed,
        "count": config.count,
        "splits": Dataset(samples=samples).counts(),
        "trajectories": entries,
    }
    write_json(out / "manifest.json", manifest)
    logger.info(
        "Generated %s expert trajectories in %s: %s.",
        len(samples),
        out,
        manifest["splits"],
    )
    return manifest


def training_config(config: RunConfig, net: NetworkParams) -> TrainingConfig:
    s_bar, s_K_bar = config.support_bounds(net)
    return TrainingConfig(
        epochs=config.epochs,
        batch_size=config.batch_size,
        dagger_interval=config.dagger_interval,
        dagger_rollouts=config.dagger_rollouts,
        bptt_window=config.bptt_window,
        stable=config.stable,
        regularizer=RegularizerConfig(
            rho_minus=config.rho_minus,
            rho_plus=config.rho_plus,
            epsilon=config.epsilon,
        ),
        learning_rate=config.learning_rate,
        s_bar=s_bar,
        s_K_bar=s_K_bar,
        team_sizes=tuple(config.team_sizes),
        comm_radius=config.comm_radius,
        sensing_radius=config.sensing_radius,
        horizon=config.horizon,
        dt=config.dt,
        squared_threshold=config.squared_threshold,
    )


def _write_training(
    out: Path,
    net: NetworkParams,
    report: list[dict[str, Any]],
    certificate: StabilityCertificate,
) -> None:
    write_json(out / "weights.json", net.to_dict())
    with (out / "report.jsonl").open("w", encoding="utf-8") as handle:
        for record in report:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    write_json(out / "certificate.json", certificate.to_dict())


def cmd_train(config: RunConfig) -> TrainingResult:
    """Train a network on a generated dataset, with the stability penalty in
    stable mode.

    Writes `weights.json`, `report.jsonl` and `certificate.json`. A diverged run
    still writes its last good parameters before the error propagates.
    """
    out = config.output_dir()
    dataset = load_dataset(config.data or out)
    rng = np.random.default_rng(config.seed)
    net = init_network(
        rng,
        state_features=config.state_features,
        filter_taps=config.filter_taps,
        layers=config.layers,
        hidden_width=config.hidden_width,
        support_kind=config.support_kind,  # type: ignore[arg-type]
        saturation=config.saturation,
    )
    training = training_config(config, net)
    try:
        result = train(net, dataset, training, rng)
    except TrainingDivergedError as err:
        checkpoint = err.checkpoint
        _write_training(
            out,
            checkpoint,
            err.report,
            certify(checkpoint, training.s_bar, training.s_K_bar),
        )
        raise
    _write_training(out, result.network, result.report, result.certificate)
    return result


def cmd_certify(config: RunConfig) -> StabilityCertificate:
    """Certify a weights file and write `certificate.json`."""
    net = load_weights(config.weights)
    out = config.output_dir()
    s_bar, s_K_bar = config.support_bounds(net)
    certificate = certify(net, s_bar, s_K_bar)
    write_json(out / "certificate.json", certificate.to_dict())
    return certificate


def policy_factory(config: RunConfig) -> Callable[[], Policy]:
    if config.policy == "expert":
        return partial(ExpertPolicy, squared_threshold=config.squared_threshold)
    if config.policy == "zero":
        return ZeroPolicy
    return partial(NetworkPolicy, load_weights(config.weights))


def _statistics(prefix: str, values: list[float]) -> dict[str, float | None]:
    if not values:
        return {f"{prefix}_{name}": None for name in STATISTICS}
    array = np.asarray(values, dtype=float)
    return {
        f"{prefix}_mean": float(array.mean()),
        f"{prefix}_median": float(np.median(array)),
        f"{prefix}_p25": float(np.percentile(array, 25)),
        f"{prefix}_p75": float(np.percentile(array, 75)),
        f"{prefix}_min": float(array.min()),
        f"{prefix}_max": float(array.max()),
    }


def evaluate_cell(
    factory: Callable[[], Policy],
    config: RunConfig,
    n_agents: int,
    comm_radius: float,
    comm_delay: int,
    seed: np.random.SeedSequence,
) -> dict[str, Any]:
    """Metrics of `eval_rollouts` rollouts on one cell of the evaluation grid."""
    rng = np.random.default_rng(seed)
    options = config.scenario_options() | {"comm_radius": comm_radius}
    trajectories: list[Trajectory] = []
    for _ in range(config.eval_rollouts):
        scenario = sample_scenario(rng, n_agents, **options)
        trajectories.append(
            rollout(
                factory(),
                scenario,
                comm_delay,
                squared_threshold=config.squared_threshold,
            )
        )
    errors = []
    for trajectory in trajectories:
        try:
            errors.append(leader_error(trajectory))
        except DegenerateScenarioError:
            logger.warning("Skipping the leader error of a degenerate scenario.")
    failures = [trajectory.failure_reason for trajectory in trajectories]
    row: dict[str, Any] = {
        "policy": config.policy,
        "n_agents": n_agents,
        "comm_radius": comm_radius,
        "comm_delay": comm_delay,
        "rollouts": len(trajectories),
    }
    row.update(_statistics("cost", [t.average_cost for t in trajectories]))
    row.update(_statistics("leader_error", errors))
    failed = sum(reason != "none" for reason in failures)
    row["failure_rate"] = failed / len(trajectories) if trajectories else 0.0
    for reason in FAILURE_REASONS:
        row[f"failures_{reason}"] = failures.count(reason)
    return row


def cmd_eval(config: RunConfig) -> list[dict[str, Any]]:
    """Sweep team size × communication radius × delay and write `eval.csv`.

    Cells run concurrently, each on its own seed spawned from the run seed.
    """
    factory = policy_factory(config)
    out = config.output_dir()
    cells = list(
        itertools.product(
            config.eval_team_sizes, config.eval_radii, config.eval_delays
        )
    )
    seeds = np.random.SeedSequence(config.seed).spawn(len(cells))

    async def gather() -> list[dict[str, Any]]:
        run = sync_to_async(evaluate_cell, thread_sensitive=False)
        return list(
            await asyncio.gather(
                *(
                    run(factory, config, n_agents, radius, delay, seed)
                    for (n_agents, radius, delay), seed in zip(
                        cells, seeds, strict=True
                    )
                )
            )
        )

    rows = async_to_sync(gather)()
    write_csv(out / "eval.csv", EVAL_FIELDS, rows)
    logger.info("Evaluated %s cells of the %s policy.", len(rows), config.policy)
    return rows


def cmd_simulate(config: RunConfig) -> Trajectory:
    """Run one rollout and write `trajectory.csv` and `summary.json`."""
    policy = policy_factory(config)()
    out = config.output_dir()
    rng = np.random.default_rng(config.seed)
    scenario = sample_scenario(rng, config.agents, **config.scenario_options())
    trajectory = rollout(
        policy,
        scenario,
        config.comm_delay,
        squared_threshold=config.squared_threshold,
    )
    write_csv(out / "trajectory.csv", TRAJECTORY_FIELDS, trajectory.rows())
    write_json(
        out / "summary.json",
        trajectory.summary()
        | {"policy": config.policy, "scenario": scenario.to_dict()},
    )
    return trajectory
