#
# flocking.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Leader-follower flocking benchmark.

Agents are planar double integrators. Followers should agree on a common
velocity while a leader steers the swarm towards a target, and nobody should
collide. The expert controller combines velocity consensus over the
communication graph, a proportional pull of the leader towards its target and
a collision-avoidance repulsion over the sensing ball.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from django_ggnn import conf
from django_ggnn.exceptions import (
    AgentOverlapError,
    CoincidentAgentsError,
    DegenerateScenarioError,
    ScenarioSamplingError,
)
from django_ggnn.ggnn import (
    DelayedStack,
    LayerState,
    NetworkParams,
    deep_delayed_forward,
    deep_forward,
)
from django_ggnn.graph import (
    Graph,
    adjacency_matrix,
    build_proximity_graph,
    pairwise_offsets,
    support_matrix,
)
from django_ggnn.tape import value_of

logger = logging.getLogger(__name__)

FailureReason = Literal["agent_collision", "leader_divergence", "team_split", "none"]
FAILURE_REASONS: tuple[FailureReason, ...] = (
    "agent_collision",
    "leader_divergence",
    "team_split",
)
FEATURE_WIDTH = 10
TRAJECTORY_FIELDS = ("t", "agent", "rx", "ry", "vx", "vy", "ux", "uy", "cost")


@dataclass(frozen=True, eq=False)
class SwarmState:
    """Positions (m) and velocities (m/s) of every agent, plus the leader and its
    target."""

    positions: np.ndarray
    velocities: np.ndarray
    leader_index: int
    target: np.ndarray

    def __post_init__(self) -> None:
        positions = np.asarray(self.positions, dtype=float)
        velocities = np.asarray(self.velocities, dtype=float)
        target = np.asarray(self.target, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 2:  # noqa: PLR2004
            msg = f"Positions must be N×2, got {positions.shape}."
            raise ValueError(msg)
        if velocities.shape != positions.shape or target.shape != (2,):
            msg = "Velocities must match the positions and the target must be 2-D."
            raise ValueError(msg)
        if not (
            np.all(np.isfinite(positions))
            and np.all(np.isfinite(velocities))
            and np.all(np.isfinite(target))
        ):
            msg = "Swarm states must be finite."
            raise ValueError(msg)
        if not 0 <= self.leader_index < positions.shape[0]:
            msg = f"Leader {self.leader_index} is not one of the agents."
            raise ValueError(msg)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "velocities", velocities)
        object.__setattr__(self, "target", target)

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def leader_offset(self) -> np.ndarray:
        """r_l − d."""
        return self.positions[self.leader_index] - self.target

    def to_dict(self) -> dict[str, Any]:
        return {
            "positions": self.positions.tolist(),
            "velocities": self.velocities.tolist(),
            "leader_index": self.leader_index,
            "target": self.target.tolist(),
        }

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> "SwarmState":
        return cls(
            positions=np.asarray(document["positions"], dtype=float).reshape(-1, 2),
            velocities=np.asarray(document["velocities"], dtype=float).reshape(-1, 2),
            leader_index=int(document["leader_index"]),
            target=np.asarray(document["target"], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class Scenario:
    """One flocking episode.

    Attributes:
        initial (SwarmState): The state at t = 0.
        comm_radius (float): Communication radius R in meters.
        sensing_radius (float): Sensing radius R_CA in meters.
        horizon (float): Episode length in seconds.
        dt (float): Sampling time in seconds.
        saturation (float): Componentwise control limit in m/s².
        leader_gain (float): Proportional gain W_p of the leader.
        max_degree (int | None): Optional cap on the neighbor count.
    """

    initial: SwarmState
    comm_radius: float = 4.0
    sensing_radius: float = 1.0
    horizon: float = 2.5
    dt: float = 0.01
    saturation: float = 5.0
    leader_gain: float = 0.5
    max_degree: int | None = None

    def __post_init__(self) -> None:
        if not self.comm_radius > self.sensing_radius > 0:
            msg = (
                "The communication radius must exceed the sensing radius, which "
                f"must be positive; got R={self.comm_radius}, "
                f"R_CA={self.sensing_radius}."
            )
            raise ValueError(msg)
        if self.dt <= 0 or self.horizon < 0:
            msg = "The sampling time must be positive and the horizon nonnegative."
            raise ValueError(msg)
        ratio = self.horizon / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            msg = f"The horizon {self.horizon} is not a multiple of dt={self.dt}."
            raise ValueError(msg)
        if self.saturation <= 0:
            msg = f"The control saturation must be positive, got {self.saturation}."
            raise ValueError(msg)

    @property
    def n_agents(self) -> int:
        return self.initial.n_agents

    @property
    def n_steps(self) -> int:
        return round(self.horizon / self.dt)

    def to_dict(self) -> dict[str, Any]:
        return {
            "initial": self.initial.to_dict(),
            "comm_radius": self.comm_radius,
            "sensing_radius": self.sensing_radius,
            "horizon": self.horizon,
            "dt": self.dt,
            "saturation": self.saturation,
            "leader_gain": self.leader_gain,
            "max_degree": self.max_degree,
        }

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> "Scenario":
        values = dict(document)
        values["initial"] = SwarmState.from_dict(values["initial"])
        return cls(**values)


@dataclass(frozen=True)
class FailureThresholds:
    """When a rollout counts as failed.

    Attributes:
        collision_distance (float): Any inter-distance below this, in meters.
        divergence_factor (float): Leader-target distance above this multiple
            of its initial value.
        split_factor (float): Any inter-distance above this multiple of the
            initial swarm diameter.
    """

    collision_distance: float = 0.1
    divergence_factor: float = 3.0
    split_factor: float = 10.0


@dataclass(eq=False)
class Trajectory:
    """A closed-loop rollout.

    `states` and `costs` hold one entry per visited state, including the final
    one; `controls`, `graphs` and `features` one entry per step.
    """

    scenario: Scenario
    states: list[SwarmState] = field(default_factory=list)
    controls: list[np.ndarray] = field(default_factory=list)
    graphs: list[Graph] = field(default_factory=list)
    features: list[np.ndarray] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    failure_reason: FailureReason = "none"
    failure_step: int | None = None
    comm_delay: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.controls)

    @property
    def failed(self) -> bool:
        return self.failure_reason != "none"

    @property
    def average_cost(self) -> float:
        """Flocking cost averaged over every visited state."""
        return float(np.mean(self.costs)) if self.costs else 0.0

    def summary(self) -> dict[str, Any]:
        try:
            error: float | None = leader_error(self)
        except DegenerateScenarioError:
            error = None
        return {
            "n_agents": self.scenario.n_agents,
            "steps": self.n_steps,
            "comm_delay": self.comm_delay,
            "average_cost": self.average_cost,
            "final_cost": self.costs[-1] if self.costs else None,
            "leader_error": error,
            "failure_reason": self.failure_reason,
            "failure_step": self.failure_step,
        }

    def rows(self) -> list[dict[str, Any]]:
        """One CSV row per visited state and agent. The final state has no
        control."""
        rows = []
        for t, state in enumerate(self.states):
            control = self.controls[t] if t < self.n_steps else None
            for agent in range(state.n_agents):
                rows.append(
                    {
                        "t": round(t * self.scenario.dt, 12),
                        "agent": agent,
                        "rx": state.positions[agent, 0],
                        "ry": state.positions[agent, 1],
                        "vx": state.velocities[agent, 0],
                        "vy": state.velocities[agent, 1],
                        "ux": "" if control is None else control[agent, 0],
                        "uy": "" if control is None else control[agent, 1],
                        "cost": self.costs[t],
                    }
                )
        return rows


def step_dynamics(state: SwarmState, u: np.ndarray, dt: float) -> SwarmState:
    """r(t+1) = r(t) + dt·v(t), v(t+1) = v(t) + dt·u(t)."""
    return SwarmState(
        positions=state.positions + dt * state.velocities,
        velocities=state.velocities + dt * np.asarray(u, dtype=float),
        leader_index=state.leader_index,
        target=state.target,
    )


def _ca_threshold(sensing_radius: float, squared_threshold: bool | None) -> float:
    if squared_threshold is None:
        squared_threshold = conf.get_ca_squared_threshold()
    return sensing_radius**2 if squared_threshold else sensing_radius


def ca_gradient(
    r_ij: np.ndarray, sensing_radius: float, *, squared_threshold: bool | None = None
) -> np.ndarray:
    """Gradient of the collision-avoidance potential at offset r_ij = r_i − r_j.

    Returns −r/‖r‖⁴ − r/‖r‖² when ‖r‖² is within the threshold and zero
    otherwise. The threshold is R_CA, or R_CA² when `squared_threshold` is set
    (the setting `GGNN_CA_SQUARED_THRESHOLD` decides by default).

    Raises:
        CoincidentAgentsError: If the offset is zero.
    """
    r = np.asarray(r_ij, dtype=float)
    norm2 = float(r @ r)
    if norm2 == 0.0:
        msg = "coincident agents: the collision-avoidance gradient is undefined."
        raise CoincidentAgentsError(msg)
    if norm2 > _ca_threshold(sensing_radius, squared_threshold):
        return np.zeros(2)
    return -r / norm2**2 - r / norm2


def sensing_sums(
    positions: np.ndarray,
    sensing_radius: float,
    *,
    squared_threshold: bool | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Σ_j r_ij/‖r_ij‖⁴ and Σ_j r_ij/‖r_ij‖² over each agent's sensing set.

    Raises:
        CoincidentAgentsError: If two agents share a position.
    """
    offsets = pairwise_offsets(np.asarray(positions, dtype=float))
    dist2 = np.einsum("ijk,ijk->ij", offsets, offsets)
    others = ~np.eye(offsets.shape[0], dtype=bool)
    if np.any(dist2[others] == 0.0):
        msg = "coincident agents: two agents share a position."
        raise CoincidentAgentsError(msg)
    mask = others & (dist2 <= _ca_threshold(sensing_radius, squared_threshold))
    safe = np.where(mask, dist2, 1.0)[..., None]
    quartic = np.where(mask[..., None], offsets / safe**2, 0.0).sum(axis=1)
    quadratic = np.where(mask[..., None], offsets / safe, 0.0).sum(axis=1)
    return quartic, quadratic


def expert_control(
    state: SwarmState,
    graph: Graph,
    leader_gain: float,
    sensing_radius: float,
    *,
    saturation: float | None = None,
    delayed_velocities: np.ndarray | None = None,
    squared_threshold: bool | None = None,
) -> np.ndarray:
    """The expert's accelerations, saturated componentwise.

    Followers get −(L v)_i − Σ_j ∇CA(r_ij); the leader gets
    −W_p (r_l − d) − Σ_j ∇CA(r_lj). The sums run over the sensing set.

    Args:
        state (SwarmState): The current swarm state.
        graph (Graph): Communication graph at the current positions.
        leader_gain (float): W_p.
        sensing_radius (float): R_CA.
        saturation (float | None): Control limit; the setting by default.
        delayed_velocities (np.ndarray | None): Neighbor velocities as last
            received, when communication lags. Defaults to the current ones.
        squared_threshold (bool | None): Collision-avoidance threshold switch.

    Raises:
        CoincidentAgentsError: If two agents share a position.
    """
    if saturation is None:
        saturation = conf.get_control_saturation()
    v = state.velocities
    received = v if delayed_velocities is None else np.asarray(delayed_velocities)
    adjacency = adjacency_matrix(graph)
    consensus = adjacency.sum(axis=1)[:, None] * v - adjacency @ received
    quartic, quadratic = sensing_sums(
        state.positions, sensing_radius, squared_threshold=squared_threshold
    )
    repulsion = quartic + quadratic
    u = -consensus + repulsion
    leader = state.leader_index
    u[leader] = -leader_gain * state.leader_offset + repulsion[leader]
    return np.clip(u, -saturation, saturation)


def input_features(
    state: SwarmState, sensing_radius: float, *, squared_threshold: bool | None = None
) -> np.ndarray:
    """Per-agent features, N×10: velocity, the two repulsion sums, the leader's
    offset to the target (zero for followers) and a role one-hot, [1, 0] for the
    leader and [0, 1] for followers."""
    quartic, quadratic = sensing_sums(
        state.positions, sensing_radius, squared_threshold=squared_threshold
    )
    offset = np.zeros((state.n_agents, 2))
    offset[state.leader_index] = state.leader_offset
    role = np.tile([0.0, 1.0], (state.n_agents, 1))
    role[state.leader_index] = [1.0, 0.0]
    return np.hstack([state.velocities, quartic, quadratic, offset, role])


def flocking_cost(velocities: np.ndarray) -> float:
    """J(v) = (1/N) Σ_i ‖v_i − v̄‖²."""
    v = np.asarray(velocities, dtype=float)
    deviation = v - v.mean(axis=0)
    return float(np.mean(np.sum(deviation * deviation, axis=1)))


def leader_error(trajectory: Trajectory) -> float:
    """Final over initial squared distance of the leader to its target.

    Raises:
        DegenerateScenarioError: If the leader starts at the target.
    """
    first = trajectory.states[0].leader_offset
    last = trajectory.states[-1].leader_offset
    start = float(first @ first)
    if start == 0.0:
        msg = "degenerate scenario: the leader starts at its target."
        raise DegenerateScenarioError(msg)
    return float(last @ last) / start


def swarm_diameter(positions: np.ndarray) -> float:
    """Largest inter-agent distance; zero for a single agent."""
    if len(positions) < 2:  # noqa: PLR2004
        return 0.0
    distances = np.linalg.norm(pairwise_offsets(positions), axis=-1)
    return float(distances.max())


def detect_failure(
    state: SwarmState,
    thresholds: FailureThresholds,
    *,
    initial_leader_distance: float,
    initial_diameter: float,
) -> FailureReason:
    positions = state.positions
    if state.n_agents > 1:
        distances = np.linalg.norm(pairwise_offsets(positions), axis=-1)
        rows, cols = np.triu_indices(state.n_agents, k=1)
        pair = distances[rows, cols]
        if pair.min() < thresholds.collision_distance:
            return "agent_collision"
    else:
        pair = np.zeros(0)
    leader_distance = float(np.linalg.norm(state.leader_offset))
    if (
        initial_leader_distance > 0
        and leader_distance > thresholds.divergence_factor * initial_leader_distance
    ):
        return "leader_divergence"
    if initial_diameter > 0 and pair.size and (
        pair.max() > thresholds.split_factor * initial_diameter
    ):
        return "team_split"
    return "none"


class Policy:
    """A controller in the closed loop. `reset` is called once per rollout."""

    name = "policy"

    def __init__(self) -> None:
        self.scenario: Scenario | None = None
        self.comm_delay = 0

    def reset(self, scenario: Scenario, *, comm_delay: int = 0) -> None:
        if comm_delay < 0:
            msg = f"The communication delay must be nonnegative, got {comm_delay}."
            raise ValueError(msg)
        self.scenario = scenario
        self.comm_delay = comm_delay

    def act(
        self, state: SwarmState, graph: Graph, features: np.ndarray, step: int
    ) -> np.ndarray:  # no cov
        raise NotImplementedError


class ZeroPolicy(Policy):
    """Applies no control at all."""

    name = "zero"

    def act(
        self, state: SwarmState, graph: Graph, features: np.ndarray, step: int
    ) -> np.ndarray:
        return np.zeros((state.n_agents, 2))


class ExpertPolicy(Policy):
    """The expert controller. With a communication delay of d steps it only sees
    neighbor velocities from d steps earlier."""

    name = "expert"

    def __init__(self, *, squared_threshold: bool | None = None) -> None:
        super().__init__()
        self.squared_threshold = squared_threshold
        self._received: deque[np.ndarray] = deque(maxlen=1)

    def reset(self, scenario: Scenario, *, comm_delay: int = 0) -> None:
        super().reset(scenario, comm_delay=comm_delay)
        self._received = deque(maxlen=comm_delay + 1)

    def act(
        self, state: SwarmState, graph: Graph, features: np.ndarray, step: int
    ) -> np.ndarray:
        if self.scenario is None:
            msg = "The policy must be reset before it acts."
            raise RuntimeError(msg)
        self._received.append(state.velocities)
        return expert_control(
            state,
            graph,
            self.scenario.leader_gain,
            self.scenario.sensing_radius,
            saturation=self.scenario.saturation,
            delayed_velocities=self._received[0] if self.comm_delay else None,
            squared_threshold=self.squared_threshold,
        )


class NetworkPolicy(Policy):
    """A trained network. Any communication delay switches every filter to its
    unit-delayed form; delays longer than one step are not supported."""

    name = "network"

    def __init__(self, net: NetworkParams) -> None:
        super().__init__()
        self.net = net
        self._states: list[LayerState] = []
        self._stack: DelayedStack | None = None

    def reset(self, scenario: Scenario, *, comm_delay: int = 0) -> None:
        if comm_delay > 1:
            msg = (
                "Network policies run with unit-delayed filters; a delay of "
                f"{comm_delay} steps is not supported."
            )
            raise ValueError(msg)
        super().reset(scenario, comm_delay=comm_delay)
        self._states = self.net.zero_states(scenario.n_agents)
        self._stack = None

    def act(
        self, state: SwarmState, graph: Graph, features: np.ndarray, step: int
    ) -> np.ndarray:
        support = support_matrix(graph, self.net.support_kind)
        if not self.comm_delay:
            control, self._states = deep_forward(
                self.net, support, self._states, features
            )
            return value_of(control)
        if self._stack is None:
            self._stack = DelayedStack.warm(
                self.net, support, self._states, features, last_time=step - 1
            )
        control, self._states = deep_delayed_forward(
            self.net, self._stack, support, features, time=step
        )
        return control


def rollout(
    policy: Policy,
    scenario: Scenario,
    comm_delay: int = 0,
    *,
    thresholds: FailureThresholds | None = None,
    squared_threshold: bool | None = None,
) -> Trajectory:
    """Run `policy` in closed loop over the scenario horizon.

    The graph is rebuilt from the positions at every step. Failures are
    recorded with the step at which they first occur and the rollout goes on;
    only an exact agent overlap ends it early.
    """
    thresholds = thresholds or FailureThresholds()
    policy.reset(scenario, comm_delay=comm_delay)
    state = scenario.initial
    trajectory = Trajectory(scenario=scenario, comm_delay=comm_delay)
    trajectory.states.append(state)
    trajectory.costs.append(flocking_cost(state.velocities))
    initial_leader_distance = float(np.linalg.norm(state.leader_offset))
    initial_diameter = swarm_diameter(state.positions)
    for step in range(scenario.n_steps):
        try:
            graph = build_proximity_graph(
                state.positions, scenario.comm_radius, max_degree=scenario.max_degree
            )
        except AgentOverlapError:
            if not trajectory.failed:
                trajectory.failure_reason = "agent_collision"
                trajectory.failure_step = step
            logger.warning("Rollout stopped at step %s: agents overlap.", step)
            break
        features = input_features(
            state, scenario.sensing_radius, squared_threshold=squared_threshold
        )
        control = np.clip(
            policy.act(state, graph, features, step),
            -scenario.saturation,
            scenario.saturation,
        )
        trajectory.graphs.append(graph)
        trajectory.features.append(features)
        trajectory.controls.append(control)
        state = step_dynamics(state, control, scenario.dt)
        trajectory.states.append(state)
        trajectory.costs.append(flocking_cost(state.velocities))
        if not trajectory.failed:
            reason = detect_failure(
                state,
                thresholds,
                initial_leader_distance=initial_leader_distance,
                initial_diameter=initial_diameter,
            )
            if reason != "none":
                trajectory.failure_reason = reason
                trajectory.failure_step = step + 1
                logger.info(
                    "%s rollout failed at step %s: %s.", policy.name, step + 1, reason
                )
    return trajectory


@dataclass(frozen=True)
class ScenarioGeometry:
    """Ranges used to draw initial conditions.

    Attributes:
        min_spacing (float): Smallest distance between two agents, in meters.
        max_spacing (float): Largest distance from a new agent to the agent it
            is placed next to, in meters.
        max_speed (float): Velocity components are uniform in ±max_speed.
        target_extent (float): Side of the square around the leader in which
            the target is drawn.
        max_attempts (int): Rejection budget per agent.
    """

    min_spacing: float = 0.6
    max_spacing: float = 1.0
    max_speed: float = 2.0
    target_extent: float = 20.0
    max_attempts: int = 1000


def sample_scenario(
    rng: np.random.Generator,
    n_agents: int,
    geometry: ScenarioGeometry | None = None,
    *,
    comm_radius: float = 4.0,
    sensing_radius: float = 1.0,
    horizon: float = 2.5,
    dt: float | None = None,
    saturation: float | None = None,
    leader_gain: float = 0.5,
    max_degree: int | None = None,
) -> Scenario:
    """Draw a random scenario.

    Agents are placed one at a time next to a randomly chosen agent already
    placed, at a distance within the spacing band, and kept only if no other
    agent is closer than the minimum spacing. Every agent then has its nearest
    neighbor within the band.

    Raises:
        ValueError: If `n_agents` is not positive.
        ScenarioSamplingError: If the rejection budget runs out.
    """
    geometry = geometry or ScenarioGeometry()
    if n_agents < 1:
        msg = f"A scenario needs at least one agent, got {n_agents}."
        raise ValueError(msg)
    positions = [np.zeros(2)]
    budget = geometry.max_attempts * n_agents
    attempts = 0
    while len(positions) < n_agents:
        if attempts >= budget:
            msg = (
                f"Could not place {n_agents} agents within {budget} attempts; "
                f"placed {len(positions)}."
            )
            raise ScenarioSamplingError(msg)
        attempts += 1
        anchor = positions[int(rng.integers(len(positions)))]
        angle = rng.uniform(0.0, 2.0 * np.pi)
        distance = rng.uniform(geometry.min_spacing, geometry.max_spacing)
        candidate = anchor + distance * np.array([np.cos(angle), np.sin(angle)])
        if all(
            np.linalg.norm(candidate - placed) >= geometry.min_spacing
            for placed in positions
        ):
            positions.append(candidate)
    velocities = rng.uniform(-geometry.max_speed, geometry.max_speed, (n_agents, 2))
    leader = int(rng.integers(n_agents))
    half = geometry.target_extent / 2.0
    target = positions[leader] + rng.uniform(-half, half, 2)
    return Scenario(
        initial=SwarmState(
            positions=np.array(positions),
            velocities=velocities,
            leader_index=leader,
            target=target,
        ),
        comm_radius=comm_radius,
        sensing_radius=sensing_radius,
        horizon=horizon,
        dt=dt if dt is not None else conf.get_sampling_time(),
        saturation=(
            saturation if saturation is not None else conf.get_control_saturation()
        ),
        leader_gain=leader_gain,
        max_degree=max_degree,
    )
