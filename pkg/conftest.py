#
# conftest.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

from collections.abc import Generator
from typing import Any

import numpy as np
import pytest

from django_ggnn.flocking import Scenario, SwarmState
from django_ggnn.ggnn import NetworkParams, init_network
from django_ggnn.graph import Graph
from django_ggnn.models import GGNNController

pytestmark = pytest.mark.django_db(transaction=True)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


@pytest.fixture
def small_net(rng) -> NetworkParams:
    """A one-layer network small enough for finite-difference checks."""
    return init_network(
        rng, state_features=4, filter_taps=1, layers=1, hidden_width=6
    )


@pytest.fixture
def deep_net(rng) -> NetworkParams:
    return init_network(
        rng, state_features=3, filter_taps=2, layers=2, hidden_width=5
    )


@pytest.fixture(scope="session")
def path_graph() -> Graph:
    """Three agents in a line: 0 – 1 – 2."""
    return Graph(n_agents=3, edges={(0, 1): 1.0, (1, 2): 1.0})


@pytest.fixture
def square_state() -> SwarmState:
    """Four agents on a 2 m square, moving slowly, the leader 3 m from its
    target. Nobody is inside anybody's sensing ball."""
    return SwarmState(
        positions=np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]]),
        velocities=np.array([[0.2, 0.0], [0.0, 0.1], [-0.1, 0.0], [0.0, -0.2]]),
        leader_index=0,
        target=np.array([3.0, 0.0]),
    )


@pytest.fixture
def square_scenario(square_state) -> Scenario:
    return Scenario(
        initial=square_state,
        comm_radius=4.0,
        sensing_radius=1.0,
        horizon=0.2,
        dt=0.01,
        saturation=5.0,
        leader_gain=0.5,
    )


@pytest.fixture
def controller(small_net) -> Generator[GGNNController, Any, Any]:
    controller = GGNNController.objects.create(
        name="square-swarm", weights=small_net.to_dict()
    )
    yield controller
    controller.delete()


@pytest.fixture
def empty_controller() -> Generator[GGNNController, Any, Any]:
    controller = GGNNController.objects.create(name="untrained")
    yield controller
    controller.delete()
