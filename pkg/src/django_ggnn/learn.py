#
# learn.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Imitation learning of the flocking expert.

Training minimizes the mean squared error between network and expert controls
plus, in stable mode, the penalty that pushes every layer's δISS margin below
1 + ε. Gradients come from backpropagation through time over windows of each
recorded trajectory. Every `dagger_interval` epochs the current network is
rolled out on fresh scenarios and the expert labels the states it visits.
"""

import asyncio
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Literal

import numpy as np
from asgiref.sync import async_to_sync, sync_to_async

from django_ggnn import conf, tape
from django_ggnn.exceptions import NonFiniteValueError, TrainingDivergedError
from django_ggnn.flocking import (
    FEATURE_WIDTH,
    NetworkPolicy,
    Policy,
    Scenario,
    Trajectory,
    expert_control,
    rollout,
    sample_scenario,
)
from django_ggnn.ggnn import (
    LayerState,
    NetworkParams,
    deep_forward,
    named_arrays,
    with_arrays,
)
from django_ggnn.graph import (
    SupportKind,
    build_proximity_graph,
    default_support_bound,
    stacked_shift_norm_bound,
    support_matrix,
)
from django_ggnn.optim import OptimizerState, adam_step
from django_ggnn.stability import (
    RegularizerConfig,
    StabilityCertificate,
    certify,
    diss_margins,
    stability_penalty,
)
from django_ggnn.tape import Operand, Tape, value_of

logger = logging.getLogger(__name__)

Split = Literal["train", "validation", "test"]
SPLITS: tuple[Split, ...] = ("train", "validation", "test")


@dataclass(eq=False)
class Sample:
    """Expert-labeled states of one trajectory.

    Attributes:
        scenario (Scenario): The scenario the states come from.
        positions (np.ndarray): T×N×2 positions at every labeled step.
        velocities (np.ndarray): T×N×2 velocities at every labeled step.
        features (np.ndarray): T×N×10 agent features.
        controls (np.ndarray): T×N×2 expert controls.
        split (Split): Which subset the sample belongs to.
    """

    scenario: Scenario
    positions: np.ndarray
    velocities: np.ndarray
    features: np.ndarray
    controls: np.ndarray
    split: Split = "train"
    _supports: dict[str, list[np.ndarray]] = field(
        default_factory=dict, init=False, repr=False
    )

    def __post_init__(self) -> None:
        horizons = {
            len(self.positions),
            len(self.velocities),
            len(self.features),
            len(self.controls),
        }
        if len(horizons) != 1:
            msg = "Positions, velocities, features and controls must share a horizon."
            raise ValueError(msg)
        if self.split not in SPLITS:
            msg = f"Unknown split {self.split!r}."
            raise ValueError(msg)

    @property
    def horizon(self) -> int:
        return len(self.controls)

    @property
    def n_agents(self) -> int:
        return self.scenario.n_agents

    def supports(self, kind: SupportKind) -> list[np.ndarray]:
        """The support at every labeled step, rebuilt from the positions."""
        if kind not in self._supports:
            self._supports[kind] = [
                support_matrix(
                    build_proximity_graph(
                        positions,
                        self.scenario.comm_radius,
                        max_degree=self.scenario.max_degree,
                    ),
                    kind,
                ).entries
                for positions in self.positions
            ]
        return self._supports[kind]

    @classmethod
    def from_trajectory(
        cls,
        trajectory: Trajectory,
        *,
        controls: np.ndarray | None = None,
        split: Split = "train",
    ) -> "Sample":
        """Label the visited states of a trajectory, by default with the controls
        it applied."""
        n_agents = trajectory.scenario.n_agents
        steps = trajectory.n_steps
        states = trajectory.states[:steps]

        def stacked(items: Sequence[np.ndarray], width: int) -> np.ndarray:
            if not items:
                return np.zeros((0, n_agents, width))
            return np.stack(items)

        return cls(
            scenario=trajectory.scenario,
            positions=stacked([s.positions for s in states], 2),
            velocities=stacked([s.velocities for s in states], 2),
            features=stacked(trajectory.features, FEATURE_WIDTH),
            controls=(
                stacked(trajectory.controls, 2) if controls is None else controls
            ),
            split=split,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario.to_dict(),
            "split": self.split,
            "positions": self.positions.tolist(),
            "velocities": self.velocities.tolist(),
            "features": self.features.tolist(),
            "controls": self.controls.tolist(),
        }

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> "Sample":
        scenario = Scenario.from_dict(document["scenario"])
        n_agents = scenario.n_agents

        def array(key: str, width: int) -> np.ndarray:
            return np.asarray(document[key], dtype=float).reshape(-1, n_agents, width)

        return cls(
            scenario=scenario,
            positions=array("positions", 2),
            velocities=array("velocities", 2),
            features=array("features", FEATURE_WIDTH),
            controls=array("controls", 2),
            split=document.get("split", "train"),
        )


@dataclass
class Dataset:
    """Labeled samples tagged with their split."""

    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: Split) -> list[Sample]:
        return [sample for sample in self.samples if sample.split == name]

    def counts(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def extend(self, samples: Sequence[Sample]) -> "Dataset":
        """A new dataset with `samples` appended."""
        return Dataset(samples=[*self.samples, *samples])


def split_sizes(
    n: int, train: float = 0.7, validation: float = 0.1
) -> tuple[int, int, int]:
    """Sizes of the train, validation and test subsets of `n` samples."""
    n_train = min(round(train * n), n)
    n_validation = min(round(validation * n), n - n_train)
    return n_train, n_validation, n - n_train - n_validation


def assign_splits(samples: Sequence[Sample], rng: np.random.Generator) -> None:
    """Tag the samples train/validation/test after a seeded shuffle."""
    n_train, n_validation, _ = split_sizes(len(samples))
    for rank, index in enumerate(rng.permutation(len(samples))):
        if rank < n_train:
            samples[index].split = "train"
        elif rank < n_train + n_validation:
            samples[index].split = "validation"
        else:
            samples[index].split = "test"


def squared_error(
    predicted: Sequence[Operand], expert: Sequence[np.ndarray] | np.ndarray
) -> Any:
    """Sum of squared control errors over steps, agents and axes. Recorded
    predictions keep the sum on their tape.

    Raises:
        ValueError: If the horizons differ.
    """
    if len(predicted) != len(expert):
        msg = f"Horizons differ: {len(predicted)} predicted, {len(expert)} expert."
        raise ValueError(msg)
    squared: Any = 0.0
    for y, target in zip(predicted, expert, strict=True):
        squared = tape.add(squared, tape.total(tape.square(tape.sub(y, target))))
    return squared


def imitation_loss(
    predicted: Sequence[Operand],
    expert: Sequence[np.ndarray] | np.ndarray,
    margins: Sequence[Any] = (),
    cfg: RegularizerConfig | None = None,
) -> Any:
    """Mean squared control error over steps, agents and axes, plus the
    stability penalty of `margins` when `cfg` is given.

    Raises:
        ValueError: If the horizons differ.
    """
    squared = squared_error(predicted, expert)
    count = sum(np.size(target) for target in expert)
    loss = tape.scale(squared, 1.0 / count) if count else squared
    if cfg is not None and margins:
        loss = tape.add(loss, stability_penalty(margins, cfg))
    return tape.scalar(loss)


@dataclass
class LossEvaluation:
    """Loss of a minibatch and its gradient with respect to every parameter."""

    loss: float
    mse: float
    penalty: float
    grads: dict[str, np.ndarray]


def _sample_gradient(
    net: NetworkParams,
    arrays: dict[str, np.ndarray],
    sample: Sample,
    window: int | None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Sum of squared control errors over a sample and its gradient, by
    backpropagation through time over consecutive windows. The recurrent state
    carries across windows but the gradient does not."""
    supports = sample.supports(net.support_kind)
    states = net.zero_states(sample.n_agents)
    total = 0.0
    grads = {name: np.zeros_like(value) for name, value in arrays.items()}
    length = window or max(sample.horizon, 1)
    for start in range(0, sample.horizon, length):
        recorder = Tape()
        watched = {name: recorder.watch(value) for name, value in arrays.items()}
        live = with_arrays(net, watched)
        stop = min(start + length, sample.horizon)
        controls = []
        for t in range(start, stop):
            control, states = deep_forward(
                live, supports[t], states, sample.features[t]
            )
            controls.append(control)
        squared = squared_error(controls, sample.controls[start:stop])
        for name, grad in recorder.gradient(squared, watched).items():
            grads[name] += grad
        total += float(value_of(squared))
        states = [LayerState(x=value_of(state.x)) for state in states]
    return total, grads


def loss_and_grad(
    net: NetworkParams,
    samples: Sequence[Sample],
    *,
    regularizer: RegularizerConfig | None,
    s_bar: float,
    s_K_bar: float,
    window: int | None = None,
) -> LossEvaluation:
    """Imitation loss of a minibatch, plus the stability penalty when a
    regularizer is given, and its gradient.

    Samples are reduced in the given order.

    Raises:
        NonFiniteValueError: If a recorded operation is not finite.
    """
    arrays = named_arrays(net)
    grads = {name: np.zeros_like(value) for name, value in arrays.items()}
    squared = 0.0
    count = 0
    for sample in samples:
        sample_squared, sample_grads = _sample_gradient(net, arrays, sample, window)
        squared += sample_squared
        count += sample.controls.size
        for name, grad in sample_grads.items():
            grads[name] += grad
    mse = squared / count if count else 0.0
    if count:
        for name in grads:
            grads[name] /= count
    penalty = 0.0
    if regularizer is not None:
        recorder = Tape()
        watched = {name: recorder.watch(value) for name, value in arrays.items()}
        live = with_arrays(net, watched)
        value = stability_penalty(diss_margins(live, s_bar, s_K_bar), regularizer)
        penalty = float(value_of(value))
        for name, grad in recorder.gradient(value, watched).items():
            grads[name] += grad
    return LossEvaluation(loss=mse + penalty, mse=mse, penalty=penalty, grads=grads)


def evaluate_mse(net: NetworkParams, samples: Sequence[Sample]) -> float:
    """Imitation MSE of `net` over whole samples, without gradients."""
    predicted = []
    expert = []
    for sample in samples:
        supports = sample.supports(net.support_kind)
        states = net.zero_states(sample.n_agents)
        for t in range(sample.horizon):
            control, states = deep_forward(net, supports[t], states, sample.features[t])
            predicted.append(value_of(control))
        expert.extend(sample.controls)
    return float(imitation_loss(predicted, expert))


def run_rollouts(
    policy_factory: Callable[[], Policy],
    scenarios: Sequence[Scenario],
    *,
    comm_delay: int = 0,
    squared_threshold: bool | None = None,
) -> list[Trajectory]:
    """Roll a fresh policy out on every scenario, concurrently. Results come
    back in scenario order."""

    async def gather() -> list[Trajectory]:
        run = sync_to_async(rollout, thread_sensitive=False)
        return list(
            await asyncio.gather(
                *(
                    run(
                        policy_factory(),
                        scenario,
                        comm_delay,
                        squared_threshold=squared_threshold,
                    )
                    for scenario in scenarios
                )
            )
        )

    if not scenarios:
        return []
    return async_to_sync(gather)()


def expert_labels(
    trajectory: Trajectory, *, squared_threshold: bool | None = None
) -> np.ndarray:
    """The expert control at every state a trajectory visited, T×N×2."""
    scenario = trajectory.scenario
    labels = [
        expert_control(
            state,
            graph,
            scenario.leader_gain,
            scenario.sensing_radius,
            saturation=scenario.saturation,
            squared_threshold=squared_threshold,
        )
        for state, graph in zip(
            trajectory.states[: trajectory.n_steps], trajectory.graphs, strict=True
        )
    ]
    if not labels:
        return np.zeros((0, scenario.n_agents, 2))
    return np.stack(labels)


def dagger_round(
    policy_factory: Callable[[], Policy],
    dataset: Dataset,
    scenarios: Sequence[Scenario],
    *,
    squared_threshold: bool | None = None,
) -> Dataset:
    """Roll the learned policy out on `scenarios`, label every visited state
    with the expert and append the results to the training split.

    Rollouts that fail are kept; their states are the informative ones.
    """
    if not scenarios:
        return dataset
    trajectories = run_rollouts(
        policy_factory, scenarios, squared_threshold=squared_threshold
    )
    samples = [
        Sample.from_trajectory(
            trajectory,
            controls=expert_labels(trajectory, squared_threshold=squared_threshold),
            split="train",
        )
        for trajectory in trajectories
    ]
    failures = sum(trajectory.failed for trajectory in trajectories)
    logger.info(
        "DAGGER round: %s rollouts, %s labeled steps, %s failures.",
        len(trajectories),
        sum(sample.horizon for sample in samples),
        failures,
    )
    return dataset.extend(samples)


@dataclass(frozen=True)
class TrainingConfig:
    """Settings of a training run.

    Attributes:
        epochs (int): Passes over the training split.
        batch_size (int): Trajectories per gradient step.
        dagger_interval (int): Epochs between DAGGER rounds; 0 disables them.
        dagger_rollouts (int): Rollouts per DAGGER round.
        bptt_window (int | None): Truncation length; None uses whole samples.
        stable (bool): Whether the stability penalty is added.
        regularizer (RegularizerConfig): Penalty weights.
        learning_rate (float): Adam step size.
        s_bar (float | None): Assumed bound on ‖S‖∞.
        s_K_bar (float | None): Assumed bound on ‖[I, S, …, S^K]‖∞.
        team_sizes (tuple[int, ...]): Team sizes of DAGGER scenarios; the largest
            also bounds adjacency supports.
        comm_radius (float): Communication radius of DAGGER scenarios.
        sensing_radius (float): Sensing radius of DAGGER scenarios.
        horizon (float): Horizon of DAGGER scenarios.
        dt (float | None): Sampling time of DAGGER scenarios.
        squared_threshold (bool | None): Collision-avoidance threshold switch.
    """

    epochs: int = 120
    batch_size: int = 8
    dagger_interval: int = 20
    dagger_rollouts: int = 4
    bptt_window: int | None = None
    stable: bool = True
    regularizer: RegularizerConfig = field(
        default_factory=RegularizerConfig.from_settings
    )
    learning_rate: float = field(default_factory=conf.get_learning_rate)
    s_bar: float | None = None
    s_K_bar: float | None = None
    team_sizes: tuple[int, ...] = (4,)
    comm_radius: float = 4.0
    sensing_radius: float = 1.0
    horizon: float = 2.5
    dt: float | None = None
    squared_threshold: bool | None = None

    def support_bounds(self, net: NetworkParams) -> tuple[float, float]:
        s_bar = self.s_bar
        if s_bar is None:
            s_bar = default_support_bound(net.support_kind, max(self.team_sizes))
        s_K_bar = self.s_K_bar
        if s_K_bar is None:
            s_K_bar = stacked_shift_norm_bound(s_bar, net.k_order)
        return s_bar, s_K_bar


@dataclass
class TrainingResult:
    """The selected network, its certificate and one record per epoch."""

    network: NetworkParams
    certificate: StabilityCertificate
    report: list[dict[str, Any]] = field(default_factory=list)
    dataset: Dataset | None = None


def train(
    net: NetworkParams,
    dataset: Dataset,
    config: TrainingConfig,
    rng: np.random.Generator,
) -> TrainingResult:
    """Train `net` by imitation with minibatch BPTT and Adam.

    The returned network is the one with the lowest validation MSE (training
    MSE when the validation split is empty). With zero epochs the initialization
    comes back with an empty report.

    Raises:
        ValueError: If there are epochs to run and no training samples.
        TrainingDivergedError: If the loss stops being finite. It carries the
            last parameters with a finite loss and the report so far.
    """
    s_bar, s_K_bar = config.support_bounds(net)
    report: list[dict[str, Any]] = []
    if config.epochs <= 0:
        return TrainingResult(
            network=net,
            certificate=certify(net, s_bar, s_K_bar),
            report=report,
            dataset=dataset,
        )
    if not dataset.split("train"):
        msg = "The dataset has no training samples."
        raise ValueError(msg)
    regularizer = config.regularizer if config.stable else None
    optimizer = OptimizerState(learning_rate=config.learning_rate)
    params = named_arrays(net)
    current = net
    best_network, best_mse = net, np.inf
    for epoch in range(1, config.epochs + 1):
        training = dataset.split("train")
        order = rng.permutation(len(training))
        losses = []
        for start in range(0, len(training), config.batch_size):
            batch = [training[i] for i in order[start : start + config.batch_size]]
            try:
                evaluation = loss_and_grad(
                    current,
                    batch,
                    regularizer=regularizer,
                    s_bar=s_bar,
                    s_K_bar=s_K_bar,
                    window=config.bptt_window,
                )
            except NonFiniteValueError as err:
                msg = (
                    f"Training diverged in epoch {epoch}: {err}"
                    f" (operation {err.operation_index})."
                )
                raise TrainingDivergedError(
                    msg, checkpoint=current, report=report
                ) from err
            if not np.isfinite(evaluation.loss):
                msg = f"Training diverged in epoch {epoch}: the loss is not finite."
                raise TrainingDivergedError(msg, checkpoint=current, report=report)
            losses.append(evaluation.loss)
            params = adam_step(params, evaluation.grads, optimizer)
            current = with_arrays(net, params)
        added = 0
        if (
            config.dagger_interval
            and config.dagger_rollouts
            and epoch % config.dagger_interval == 0
        ):
            scenarios = [
                sample_scenario(
                    rng,
                    int(rng.choice(config.team_sizes)),
                    comm_radius=config.comm_radius,
                    sensing_radius=config.sensing_radius,
                    horizon=config.horizon,
                    dt=config.dt,
                    saturation=current.saturation,
                )
                for _ in range(config.dagger_rollouts)
            ]
            before = len(dataset)
            dataset = dagger_round(
                partial(NetworkPolicy, current),
                dataset,
                scenarios,
                squared_threshold=config.squared_threshold,
            )
            added = len(dataset) - before
        certificate = certify(current, s_bar, s_K_bar)
        validation = dataset.split("validation") or dataset.split("train")
        validation_mse = evaluate_mse(current, validation)
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "validation_mse": validation_mse,
            "margins": certificate.diss_margins,
            "iss_margins": [layer.A_margin for layer in certificate.layers],
            "verdict_iss": certificate.verdict_iss,
            "verdict_diss": certificate.verdict_diss,
            "dagger_samples": added,
            "train_samples": len(dataset.split("train")),
        }
        report.append(record)
        logger.info(
            "Epoch %s: loss %.6g, validation MSE %.6g, margins %s.",
            epoch,
            record["loss"],
            validation_mse,
            record["margins"],
        )
        if validation_mse < best_mse:
            best_network, best_mse = current, validation_mse
    return TrainingResult(
        network=best_network,
        certificate=certify(best_network, s_bar, s_K_bar),
        report=report,
        dataset=dataset,
    )
