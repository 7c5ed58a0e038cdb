#
# test_flocking.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

import json
from dataclasses import replace

import numpy as np
import pytest

from django_ggnn.exceptions import (
    CoincidentAgentsError,
    DegenerateScenarioError,
    ScenarioSamplingError,
)
from django_ggnn.flocking import (
    FEATURE_WIDTH,
    TRAJECTORY_FIELDS,
    ExpertPolicy,
    FailureThresholds,
    NetworkPolicy,
    Scenario,
    ScenarioGeometry,
    SwarmState,
    Trajectory,
    ZeroPolicy,
    ca_gradient,
    expert_control,
    flocking_cost,
    input_features,
    leader_error,
    rollout,
    sample_scenario,
    step_dynamics,
)
from django_ggnn.ggnn import BANK_NAMES, init_network, named_arrays, with_arrays
from django_ggnn.graph import adjacency_matrix, build_proximity_graph
from django_ggnn.stability import certify


def make_state(positions, velocities, leader=0, target=(5.0, 0.0)) -> SwarmState:
    return SwarmState(
        positions=np.array(positions, dtype=float),
        velocities=np.array(velocities, dtype=float),
        leader_index=leader,
        target=np.array(target, dtype=float),
    )


def test_step_dynamics_without_control(square_state) -> None:
    following = step_dynamics(square_state, np.zeros((4, 2)), 0.1)
    assert np.array_equal(following.velocities, square_state.velocities)
    assert np.allclose(
        following.positions, square_state.positions + 0.1 * square_state.velocities
    )
    assert following.leader_index == square_state.leader_index


def test_step_dynamics_telescopes() -> None:
    state = make_state([[0.0, 0.0], [1.0, 1.0]], np.zeros((2, 2)))
    u = np.array([[1.0, -2.0], [0.5, 0.0]])
    for _ in range(4):
        state = step_dynamics(state, u, 0.25)
    assert np.array_equal(state.velocities, u)


def test_step_dynamics_matches_transcription(rng) -> None:
    positions = rng.normal(size=(5, 2))
    velocities = rng.normal(size=(5, 2))
    u = rng.normal(size=(5, 2))
    state = step_dynamics(make_state(positions, velocities), u, 0.01)
    for i, axis in np.ndindex(5, 2):
        r, v = positions[i, axis], velocities[i, axis]
        assert state.positions[i, axis] == r + 0.01 * v
        assert state.velocities[i, axis] == v + 0.01 * u[i, axis]


@pytest.mark.parametrize(
    "r_ij,expected",
    [
        ((1.0, 0.0), (-2.0, 0.0)),
        ((0.5, 0.0), (-10.0, 0.0)),
        ((1.5, 0.0), (0.0, 0.0)),
        ((0.0, -0.5), (0.0, 10.0)),
    ],
)
def test_ca_gradient(r_ij, expected) -> None:
    assert np.array_equal(ca_gradient(np.array(r_ij), 1.0), expected)


def test_ca_gradient_threshold_switch() -> None:
    r = np.array([0.92, 0.0])
    assert np.any(ca_gradient(r, 0.9))
    assert np.any(ca_gradient(r, 0.9, squared_threshold=False))
    assert not np.any(ca_gradient(r, 0.9, squared_threshold=True))


def test_ca_gradient_follows_setting(settings) -> None:
    settings.GGNN_CA_SQUARED_THRESHOLD = True
    assert not np.any(ca_gradient(np.array([0.92, 0.0]), 0.9))


def test_ca_gradient_rejects_coincident_agents() -> None:
    with pytest.raises(CoincidentAgentsError, match="coincident agents"):
        ca_gradient(np.zeros(2), 1.0)


def test_expert_followers_agree_on_common_velocity(square_state) -> None:
    state = replace(square_state, velocities=np.tile([0.3, -0.1], (4, 1)))
    graph = build_proximity_graph(state.positions, 4.0)
    u = expert_control(state, graph, 0.5, 1.0, saturation=5.0)
    assert np.allclose(u[1:], 0.0, atol=1e-15)
    assert np.allclose(u[0], [1.5, 0.0])


def test_expert_leader_at_target_rests() -> None:
    state = make_state(
        [[0.0, 0.0], [3.0, 0.0]], [[0.4, 0.0], [0.0, 0.0]], target=(0.0, 0.0)
    )
    graph = build_proximity_graph(state.positions, 4.0)
    u = expert_control(state, graph, 0.5, 1.0, saturation=5.0)
    assert np.array_equal(u[0], [0.0, 0.0])
    assert np.allclose(u[1], [0.4, 0.0])


def test_expert_matches_transcription() -> None:
    positions = np.array([[0.0, 0.0], [0.8, 0.0], [3.0, 0.5]])
    velocities = np.array([[0.1, 0.2], [-0.3, 0.0], [0.2, -0.1]])
    state = make_state(positions, velocities, leader=2, target=(4.0, 1.5))
    graph = build_proximity_graph(positions, 2.5)
    adjacency = adjacency_matrix(graph)
    expected = np.zeros((3, 2))
    for i in range(3):
        repulsion = np.zeros(2)
        for j in range(3):
            if j != i and np.sum((positions[i] - positions[j]) ** 2) <= 1.0:
                repulsion -= ca_gradient(positions[i] - positions[j], 1.0)
        if i == 2:
            expected[i] = -0.5 * (positions[2] - state.target) + repulsion
        else:
            consensus = sum(
                adjacency[i, j] * (velocities[i] - velocities[j]) for j in range(3)
            )
            expected[i] = -consensus + repulsion
    expected = np.clip(expected, -5.0, 5.0)
    assert np.allclose(expert_control(state, graph, 0.5, 1.0, saturation=5.0), expected)


def test_expert_saturates() -> None:
    state = make_state([[0.0, 0.0], [0.2, 0.0]], np.zeros((2, 2)), target=(50.0, 0.0))
    graph = build_proximity_graph(state.positions, 4.0)
    u = expert_control(state, graph, 0.5, 1.0, saturation=5.0)
    assert np.max(np.abs(u)) == 5.0


def test_expert_is_permutation_equivariant(rng) -> None:
    positions = rng.uniform(0.0, 3.0, size=(5, 2))
    velocities = rng.normal(size=(5, 2))
    state = make_state(positions, velocities, leader=1, target=(2.0, 2.0))
    order = rng.permutation(5)
    permuted = make_state(
        positions[order],
        velocities[order],
        leader=int(np.flatnonzero(order == 1)[0]),
        target=(2.0, 2.0),
    )
    u = expert_control(
        state, build_proximity_graph(positions, 2.0), 0.5, 1.0, saturation=50.0
    )
    u_permuted = expert_control(
        permuted,
        build_proximity_graph(positions[order], 2.0),
        0.5,
        1.0,
        saturation=50.0,
    )
    assert np.allclose(u_permuted, u[order])


def test_expert_uses_delayed_velocities(square_state) -> None:
    graph = build_proximity_graph(square_state.positions, 4.0)
    stale = np.zeros((4, 2))
    u = expert_control(
        square_state, graph, 0.5, 1.0, saturation=5.0, delayed_velocities=stale
    )
    # Neighbors report rest, so followers only damp their own velocity.
    assert np.allclose(u[1:], -3.0 * square_state.velocities[1:])


def test_isolated_follower_features() -> None:
    state = make_state([[0.0, 0.0], [10.0, 0.0]], np.zeros((2, 2)), target=(0.0, 0.0))
    features = input_features(state, 1.0)
    assert features.shape == (2, FEATURE_WIDTH)
    assert np.array_equal(features[1], [0, 0, 0, 0, 0, 0, 0, 0, 0, 1])
    assert np.array_equal(features[0], [0, 0, 0, 0, 0, 0, 0, 0, 1, 0])


def test_features_match_transcription() -> None:
    positions = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 3.0]])
    velocities = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    state = make_state(positions, velocities, leader=2, target=(1.0, 1.0))
    features = input_features(state, 1.0)
    assert np.array_equal(features[:, :2], velocities)
    # Agents 0 and 1 sense each other at 0.5 m.
    assert np.allclose(features[0, 2:4], [-8.0, 0.0])
    assert np.allclose(features[0, 4:6], [-2.0, 0.0])
    assert np.allclose(features[1, 2:4], [8.0, 0.0])
    assert np.allclose(features[1, 4:6], [2.0, 0.0])
    assert np.array_equal(features[2, 2:6], np.zeros(4))
    assert np.array_equal(features[2, 6:8], [-1.0, 2.0])
    assert np.array_equal(features[:2, 6:8], np.zeros((2, 2)))
    assert np.array_equal(features[:, 8:], [[0, 1], [0, 1], [1, 0]])


@pytest.mark.parametrize(
    "velocities,expected",
    [
        ([[1.0, 0.0], [-1.0, 0.0]], 1.0),
        ([[0.5, -0.25]] * 4, 0.0),
        ([[2.0, -1.0]], 0.0),
    ],
)
def test_flocking_cost(velocities, expected) -> None:
    assert flocking_cost(np.array(velocities)) == expected


def test_flocking_cost_matches_loop(rng) -> None:
    v = rng.normal(size=(6, 2))
    mean = [sum(v[i, a] for i in range(6)) / 6 for a in range(2)]
    expected = (
        sum((v[i, 0] - mean[0]) ** 2 + (v[i, 1] - mean[1]) ** 2 for i in range(6)) / 6
    )
    assert flocking_cost(v) == pytest.approx(expected, rel=1e-12)
    assert flocking_cost(v + np.array([3.0, -7.0])) == pytest.approx(
        flocking_cost(v), abs=1e-12
    )


def _trajectory(leader_positions, target=(4.0, 0.0)) -> Trajectory:
    states = [
        make_state([position, [-5.0, -5.0]], np.zeros((2, 2)), target=target)
        for position in leader_positions
    ]
    return Trajectory(scenario=Scenario(initial=states[0]), states=states)


@pytest.mark.parametrize(
    "leader_positions,expected",
    [
        ([[0.0, 0.0], [0.0, 0.0]], 1.0),
        ([[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]], 0.0),
        ([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 0.25),
    ],
)
def test_leader_error(leader_positions, expected) -> None:
    assert leader_error(_trajectory(leader_positions)) == expected


def test_leader_error_needs_distance() -> None:
    with pytest.raises(DegenerateScenarioError, match="degenerate scenario"):
        leader_error(_trajectory([[4.0, 0.0], [3.0, 0.0]]))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"comm_radius": 1.0, "sensing_radius": 1.0},
        {"sensing_radius": 0.0},
        {"horizon": 0.105, "dt": 0.01},
        {"dt": 0.0},
        {"saturation": -1.0},
    ],
)
def test_scenario_validation(square_state, kwargs) -> None:
    with pytest.raises(ValueError):
        Scenario(initial=square_state, **kwargs)


def test_scenario_document(square_scenario) -> None:
    restored = Scenario.from_dict(json.loads(json.dumps(square_scenario.to_dict())))
    assert restored.n_steps == 20
    assert np.array_equal(
        restored.initial.positions, square_scenario.initial.positions
    )
    assert restored.initial.leader_index == 0


def test_swarm_state_validation() -> None:
    with pytest.raises(ValueError):
        make_state([[0.0, 0.0]], [[0.0, 0.0]], leader=1)
    with pytest.raises(ValueError):
        make_state([[0.0, np.inf]], [[0.0, 0.0]])


def test_zero_policy_is_ballistic(square_scenario) -> None:
    trajectory = rollout(ZeroPolicy(), square_scenario)
    assert trajectory.n_steps == 20
    assert len(trajectory.states) == 21
    assert len(trajectory.graphs) == 20
    initial = square_scenario.initial
    assert np.allclose(
        trajectory.states[-1].positions, initial.positions + 0.2 * initial.velocities
    )
    assert len(set(trajectory.costs)) == 1
    assert not trajectory.failed


def test_rollout_rebuilds_graph_every_step(square_scenario) -> None:
    trajectory = rollout(ExpertPolicy(), square_scenario)
    for state, graph in zip(trajectory.states, trajectory.graphs, strict=False):
        rebuilt = build_proximity_graph(state.positions, square_scenario.comm_radius)
        assert graph.edges == rebuilt.edges
        assert all(i != j for i, j in graph.edges)


def test_expert_rollout_reduces_cost(square_state) -> None:
    at_target = replace(square_state, target=square_state.positions[0])
    scenario = Scenario(initial=at_target, horizon=1.0, dt=0.01)
    trajectory = rollout(ExpertPolicy(), scenario)
    assert trajectory.costs[-1] < trajectory.costs[0]
    assert trajectory.failure_reason == "none"


def test_expert_rollout_on_square(square_scenario) -> None:
    trajectory = rollout(ExpertPolicy(), square_scenario)
    summary = trajectory.summary()
    assert summary["steps"] == 20
    assert summary["failure_reason"] == "none"
    # The leader is pulled towards its target.
    assert summary["leader_error"] < 1.0


def test_expert_rollout_with_delay(square_scenario) -> None:
    delayed = rollout(ExpertPolicy(), square_scenario, comm_delay=3)
    prompt = rollout(ExpertPolicy(), square_scenario)
    assert delayed.comm_delay == 3
    assert np.array_equal(delayed.controls[0], prompt.controls[0])
    assert not np.array_equal(delayed.controls[5], prompt.controls[5])


def test_network_policy_delay_collapses_on_first_step(
    small_net, square_scenario
) -> None:
    prompt = rollout(NetworkPolicy(small_net), square_scenario)
    delayed = rollout(NetworkPolicy(small_net), square_scenario, comm_delay=1)
    assert delayed.n_steps == prompt.n_steps
    assert np.allclose(delayed.controls[0], prompt.controls[0], rtol=0.0, atol=1e-12)


def test_network_policy_rejects_long_delays(small_net, square_scenario) -> None:
    with pytest.raises(ValueError):
        rollout(NetworkPolicy(small_net), square_scenario, comm_delay=2)


def test_policy_rejects_negative_delay(square_scenario) -> None:
    with pytest.raises(ValueError):
        rollout(ZeroPolicy(), square_scenario, comm_delay=-1)


@pytest.mark.parametrize(
    "positions,velocities,target,thresholds,reason,step",
    [
        (
            [[0.0, 0.0], [1.0, 0.0]],
            [[1.0, 0.0], [-1.0, 0.1]],
            (5.0, 0.0),
            FailureThresholds(),
            "agent_collision",
            10,
        ),
        (
            [[0.0, 0.0], [0.0, 1.0]],
            [[-10.0, 0.0], [0.0, 0.0]],
            (1.0, 0.0),
            FailureThresholds(),
            "leader_divergence",
            5,
        ),
        (
            [[0.0, 0.0], [1.0, 0.0]],
            [[0.0, 0.0], [10.0, 0.0]],
            (0.0, 1.0),
            FailureThresholds(split_factor=1.5),
            "team_split",
            2,
        ),
    ],
)
def test_rollout_records_failures(
    positions, velocities, target, thresholds, reason, step
) -> None:
    scenario = Scenario(
        initial=make_state(positions, velocities, target=target),
        horizon=1.0,
        dt=0.05,
    )
    trajectory = rollout(ZeroPolicy(), scenario, thresholds=thresholds)
    assert trajectory.failure_reason == reason
    assert trajectory.failure_step == step
    # Failures are recorded, the rollout runs to the horizon.
    assert trajectory.n_steps == 20


def test_trajectory_rows(square_scenario) -> None:
    trajectory = rollout(ZeroPolicy(), square_scenario)
    rows = trajectory.rows()
    assert len(rows) == 21 * 4
    assert set(rows[0]) == set(TRAJECTORY_FIELDS)
    assert rows[-1]["ux"] == ""
    assert rows[-1]["t"] == 0.2
    assert rows[0]["ux"] == 0.0


def test_sample_single_agent(rng) -> None:
    scenario = sample_scenario(rng, 1)
    assert scenario.n_agents == 1
    assert scenario.initial.leader_index == 0
    assert scenario.n_steps == 250


def test_sample_scenario_geometry(rng) -> None:
    for _ in range(10):
        scenario = sample_scenario(rng, 4)
        positions = scenario.initial.positions
        distances = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
        np.fill_diagonal(distances, np.inf)
        nearest = distances.min(axis=1)
        assert np.all(nearest >= 0.6 - 1e-12)
        assert np.all(nearest <= 1.0 + 1e-12)
        assert np.all(np.abs(scenario.initial.velocities) <= 2.0)
        offset = scenario.initial.target - positions[scenario.initial.leader_index]
        assert np.all(np.abs(offset) <= 10.0)
        assert scenario.saturation == 5.0
        assert scenario.dt == 0.01


def test_sample_scenario_budget(rng) -> None:
    geometry = ScenarioGeometry(min_spacing=2.0, max_spacing=1.0, max_attempts=5)
    with pytest.raises(ScenarioSamplingError):
        sample_scenario(rng, 2, geometry)


def test_sample_scenario_needs_agents(rng) -> None:
    with pytest.raises(ValueError):
        sample_scenario(rng, 0)


@pytest.mark.slow
def test_expert_aligns_followers_with_a_resting_leader(rng) -> None:
    square = np.array([[0.0, 0.0], [2.6, 0.0], [0.0, 2.6], [2.6, 2.6]])
    for _ in range(100):
        positions = square + rng.uniform(-5.0, 5.0, size=2)
        leader = int(rng.integers(4))
        velocities = rng.uniform(-0.2, 0.2, size=(4, 2))
        velocities[leader] = 0.0
        scenario = Scenario(
            initial=make_state(
                positions, velocities, leader=leader, target=positions[leader]
            ),
            comm_radius=6.0,
        )
        trajectory = rollout(ExpertPolicy(), scenario)
        assert trajectory.failure_reason == "none"
        disagreement = [
            float(np.sum((state.velocities - state.velocities[leader]) ** 2))
            for state in trajectory.states
        ]
        assert all(
            later <= earlier * (1.0 + 1e-12)
            for earlier, later in zip(disagreement, disagreement[1:], strict=False)
        )
        assert trajectory.costs[-1] < trajectory.costs[0]


@pytest.mark.slow
def test_expert_leader_closes_on_its_target(rng) -> None:
    followers = np.array([[0.0, 0.0], [0.0, 1.5], [0.0, -1.5]])
    for _ in range(20):
        leader_position = np.array([rng.uniform(3.0, 4.0), rng.uniform(-0.5, 0.5)])
        angle = rng.uniform(-np.pi / 4, np.pi / 4)
        target = leader_position + rng.uniform(2.0, 4.0) * np.array(
            [np.cos(angle), np.sin(angle)]
        )
        scenario = Scenario(
            initial=make_state(
                np.vstack([leader_position, followers]),
                np.zeros((4, 2)),
                target=target,
            )
        )
        assert leader_error(rollout(ExpertPolicy(), scenario)) < 0.1


def _constant_network(banks: float, output_bias: float):
    net = init_network(
        np.random.default_rng(3),
        state_features=4,
        filter_taps=1,
        layers=1,
        hidden_width=6,
    )
    arrays = {}
    for name, value in named_arrays(net).items():
        if name.startswith("encoder."):
            arrays[name] = value
        elif name.split(".")[-1] in BANK_NAMES:
            arrays[name] = np.full_like(value, banks)
        else:
            arrays[name] = np.zeros_like(value)
    # Zero readout and head weights: the control is the same for every input.
    arrays[f"head.{len(net.head) - 1}.bias"] = np.full(2, output_bias)
    return with_arrays(net, arrays)


@pytest.mark.slow
def test_certified_network_fails_less_under_delay(rng) -> None:
    certified = _constant_network(banks=0.0, output_bias=0.0)
    uncertified = _constant_network(banks=0.2, output_bias=10.0)
    assert certify(certified, 2.0, 3.0).verdict_diss
    assert not certify(uncertified, 2.0, 3.0).verdict_diss
    square = np.array([[0.0, 0.0], [1.5, 0.0], [0.0, 1.5], [1.5, 1.5]])
    failures = {"certified": 0, "uncertified": 0}
    for _ in range(20):
        velocities = np.tile(rng.uniform(-0.2, 0.2, size=2), (4, 1))
        angle = rng.uniform(0.0, 2.0 * np.pi)
        target = square[0] + rng.uniform(1.0, 2.0) * np.array(
            [np.cos(angle), np.sin(angle)]
        )
        scenario = Scenario(initial=make_state(square, velocities, target=target))
        for label, net in (("certified", certified), ("uncertified", uncertified)):
            trajectory = rollout(NetworkPolicy(net), scenario, comm_delay=1)
            failures[label] += trajectory.failed
    assert failures["certified"] == 0
    assert failures["certified"] <= failures["uncertified"]
    assert failures["uncertified"] == 20
