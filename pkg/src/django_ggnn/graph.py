#
# graph.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Communication graphs, support matrices and the norms the certificates use."""

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from django_ggnn.exceptions import AgentOverlapError, DimensionMismatchError

SupportKind = Literal["adjacency", "laplacian", "normalized_laplacian"]


@dataclass(frozen=True, eq=False)
class Graph:
    """An undirected weighted graph over `n_agents` agents.

    Attributes:
        n_agents (int): Number of vertices.
        edges (Mapping[tuple[int, int], float]): Edge weights keyed by `(i, j)`
            with `i < j`.
    """

    n_agents: int
    edges: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        normalized: dict[tuple[int, int], float] = {}
        for (i, j), weight in self.edges.items():
            if i == j:
                msg = f"Self-loop on agent {i} is not allowed."
                raise ValueError(msg)
            if min(i, j) < 0 or max(i, j) >= self.n_agents:
                msg = f"Edge ({i}, {j}) references an agent outside the graph."
                raise ValueError(msg)
            if weight <= 0:
                msg = f"Edge ({i}, {j}) must have a positive weight, got {weight}."
                raise ValueError(msg)
            normalized[(min(i, j), max(i, j))] = float(weight)
        object.__setattr__(self, "edges", normalized)

    def neighbors(self, i: int) -> list[int]:
        """Agents sharing an edge with agent `i`, in increasing order."""
        found = [b if a == i else a for (a, b) in self.edges if i in (a, b)]
        return sorted(found)

    def degree(self, i: int) -> float:
        """Weighted degree of agent `i`."""
        return sum(w for (a, b), w in self.edges.items() if i in (a, b))


@dataclass(frozen=True, eq=False)
class SupportMatrix:
    """A dense graph shift operator.

    Attributes:
        entries (np.ndarray): The N×N matrix.
        kind (SupportKind): Which operator the entries realize.
    """

    entries: np.ndarray
    kind: SupportKind

    @property
    def n_agents(self) -> int:
        return self.entries.shape[0]


def pairwise_offsets(positions: np.ndarray) -> np.ndarray:
    """Return the N×N×2 array of offsets r_ij = r_i − r_j."""
    return positions[:, None, :] - positions[None, :, :]


def build_proximity_graph(
    positions: np.ndarray, radius: float, *, max_degree: int | None = None
) -> Graph:
    """Connect every pair of agents closer than `radius` (closed ball), with unit
    weights.

    Args:
        positions (np.ndarray): N×2 agent positions in meters.
        radius (float): Communication radius in meters.
        max_degree (int | None): If given, edges are admitted shortest first and
            only while both endpoints have fewer than `max_degree` neighbors.

    Raises:
        ValueError: If the radius is not positive or positions are not finite.
        AgentOverlapError: If two distinct agents share a position.
    """
    positions = np.asarray(positions, dtype=float)
    if radius <= 0:
        msg = f"The communication radius must be positive, got {radius}."
        raise ValueError(msg)
    if not np.all(np.isfinite(positions)):
        msg = "Agent positions must be finite."
        raise ValueError(msg)
    n_agents = positions.shape[0]
    distances = np.linalg.norm(pairwise_offsets(positions), axis=-1)
    rows, cols = np.triu_indices(n_agents, k=1)
    pair_distances = distances[rows, cols]
    if np.any(pair_distances == 0.0):
        k = int(np.flatnonzero(pair_distances == 0.0)[0])
        msg = f"agent overlap between agents {rows[k]} and {cols[k]}"
        raise AgentOverlapError(msg)
    in_range = pair_distances <= radius
    if max_degree is None:
        edges = {
            (int(i), int(j)): 1.0
            for i, j in zip(rows[in_range], cols[in_range], strict=True)
        }
        return Graph(n_agents=n_agents, edges=edges)
    degree = np.zeros(n_agents, dtype=int)
    edges = {}
    for k in np.argsort(pair_distances, kind="stable"):
        if not in_range[k]:
            continue
        i, j = int(rows[k]), int(cols[k])
        if degree[i] < max_degree and degree[j] < max_degree:
            edges[(i, j)] = 1.0
            degree[i] += 1
            degree[j] += 1
    return Graph(n_agents=n_agents, edges=edges)


def adjacency_matrix(graph: Graph) -> np.ndarray:
    adjacency = np.zeros((graph.n_agents, graph.n_agents))
    for (i, j), weight in graph.edges.items():
        adjacency[i, j] = weight
        adjacency[j, i] = weight
    return adjacency


def support_matrix(graph: Graph, kind: SupportKind) -> SupportMatrix:
    """Build the requested shift operator of `graph`.

    The normalized Laplacian is D^{-1/2} L D^{-1/2}, where isolated agents get a
    zero row and column.
    """
    adjacency = adjacency_matrix(graph)
    if kind == "adjacency":
        entries = adjacency
    else:
        degrees = adjacency.sum(axis=1)
        laplacian = np.diag(degrees) - adjacency
        if kind == "laplacian":
            entries = laplacian
        elif kind == "normalized_laplacian":
            inv_sqrt = np.zeros_like(degrees)
            connected = degrees > 0
            inv_sqrt[connected] = 1.0 / np.sqrt(degrees[connected])
            entries = inv_sqrt[:, None] * laplacian * inv_sqrt[None, :]
        else:
            msg = f"Unknown support kind: {kind}"
            raise ValueError(msg)
    entries.setflags(write=False)
    return SupportMatrix(entries=entries, kind=kind)


def as_matrix(support: SupportMatrix | np.ndarray) -> np.ndarray:
    if isinstance(support, SupportMatrix):
        return support.entries
    return np.asarray(support, dtype=float)


def apply_shift(support: SupportMatrix | np.ndarray, x: np.ndarray) -> np.ndarray:
    """One hop of neighbor communication, S·x.

    Raises:
        DimensionMismatchError: If `x` does not have one row per agent.
    """
    entries = as_matrix(support)
    x = np.asarray(x, dtype=float)
    if x.shape[0] != entries.shape[1]:
        msg = (
            f"Cannot shift a signal with {x.shape[0]} rows over a support "
            f"of size {entries.shape[0]}."
        )
        raise DimensionMismatchError(msg)
    return entries @ x


def inf_norm(matrix: np.ndarray) -> float:
    """Induced ∞-norm: the largest absolute row sum."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.size == 0:
        return 0.0
    return float(np.abs(matrix).sum(axis=1).max())


def signal_norm(x: np.ndarray) -> float:
    """Largest absolute entry of a graph signal."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return 0.0
    return float(np.abs(x).max())


def stacked_shift_norm_bound(s_max: float, K: int) -> float:
    """Upper bound Σ_{k=0..K} s_max^k on ‖[I, S, …, S^K]‖∞ when ‖S‖∞ ≤ s_max."""
    if s_max < 0:
        msg = f"The support norm bound must be nonnegative, got {s_max}."
        raise ValueError(msg)
    return float(sum(s_max**k for k in range(K + 1)))


def shift_powers(support: SupportMatrix | np.ndarray, K: int) -> list[np.ndarray]:
    """[I, S, …, S^K], each power obtained by one more shift of the previous one."""
    entries = as_matrix(support)
    powers = [np.eye(entries.shape[0])]
    for _ in range(K):
        powers.append(entries @ powers[-1])
    return powers


def stacked_shift_norm(support: SupportMatrix | np.ndarray, K: int) -> float:
    """Exact ‖[I, S, …, S^K]‖∞ of a concrete support."""
    return inf_norm(np.hstack(shift_powers(support, K)))


def stacked_shift_gap(
    first: SupportMatrix | np.ndarray, second: SupportMatrix | np.ndarray, K: int
) -> float:
    """‖S_K1 − S_K2‖∞ between the stacked powers of two supports."""
    return inf_norm(
        np.hstack(shift_powers(first, K)) - np.hstack(shift_powers(second, K))
    )


def default_support_bound(kind: SupportKind, n_agents: int | None = None) -> float:
    """Assumed bound on ‖S‖∞ for a support kind.

    The normalized Laplacian is taken as 2, its spectral bound on any topology.
    Its ∞-norm can exceed that on hub-shaped graphs (1 + √d for a star with d
    leaves), so pass an explicit `s_bar` when auditing such graphs. The
    adjacency matrix is bounded by the largest possible neighbor count, taken as
    the team size, and the Laplacian by twice the largest possible degree.

    Raises:
        ValueError: If the kind depends on the team size and none is given.
    """
    if kind == "normalized_laplacian":
        return 2.0
    if n_agents is None:
        msg = f"A team size is required to bound a {kind} support."
        raise ValueError(msg)
    if kind == "adjacency":
        return float(n_agents)
    if kind == "laplacian":
        return float(2 * max(n_agents - 1, 0))
    msg = f"Unknown support kind: {kind}"
    raise ValueError(msg)
