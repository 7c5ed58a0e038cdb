#
# test_filters.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

import numpy as np
import pytest

from django_ggnn.exceptions import DimensionMismatchError, InsufficientHistoryError
from django_ggnn.filters import (
    FilterBank,
    SignalHistory,
    delayed_filter_apply,
    filter_apply,
    stacked_taps_norm,
    tap_column_sums,
)
from django_ggnn.graph import (
    build_proximity_graph,
    inf_norm,
    signal_norm,
    stacked_shift_norm,
    stacked_shift_norm_bound,
    support_matrix,
)


def _random_support(rng, n_agents: int = 4) -> np.ndarray:
    positions = rng.uniform(0.0, 2.0, size=(n_agents, 2))
    graph = build_proximity_graph(positions, 1.5)
    return np.array(support_matrix(graph, "normalized_laplacian").entries)


def test_identity_filter(rng) -> None:
    x = rng.normal(size=(4, 3))
    bank = FilterBank.from_blocks([np.eye(3)])
    assert np.array_equal(filter_apply(bank, _random_support(rng), x), x)


def test_zero_support_keeps_first_tap(rng) -> None:
    x = rng.normal(size=(3, 2))
    bank = FilterBank(taps=rng.normal(size=(3, 2, 4)))
    out = filter_apply(bank, np.zeros((3, 3)), x)
    assert np.allclose(out, x @ bank.taps[0])


def test_filter_matches_matrix_power_oracle(rng) -> None:
    support = _random_support(rng)
    x = rng.normal(size=(4, 2))
    bank = FilterBank(taps=rng.normal(size=(3, 2, 5)))
    expected = sum(
        np.linalg.matrix_power(support, k) @ x @ bank.taps[k] for k in range(3)
    )
    assert np.allclose(filter_apply(bank, support, x), expected)


def test_filter_is_linear_in_the_signal(rng) -> None:
    support = _random_support(rng)
    bank = FilterBank(taps=rng.normal(size=(3, 2, 3)))
    x = rng.normal(size=(4, 2))
    y = rng.normal(size=(4, 2))
    combined = filter_apply(bank, support, 2.5 * x - 0.75 * y)
    assert np.allclose(
        combined,
        2.5 * filter_apply(bank, support, x) - 0.75 * filter_apply(bank, support, y),
        rtol=1e-12,
        atol=1e-12,
    )
    assert np.array_equal(
        filter_apply(bank, support, np.zeros((4, 2))), np.zeros((4, 3))
    )


@pytest.mark.parametrize("kind", ["adjacency", "laplacian", "normalized_laplacian"])
@pytest.mark.parametrize("K", [0, 1, 3])
def test_filter_output_is_bounded_by_the_norms(rng, kind, K) -> None:
    for _ in range(20):
        positions = rng.uniform(0.0, 3.0, size=(5, 2))
        support = np.array(
            support_matrix(build_proximity_graph(positions, 1.5), kind).entries
        )
        taps = rng.normal(size=(K + 1, 3, 2))
        x = rng.uniform(-1.0, 1.0, size=(5, 3))
        out = signal_norm(filter_apply(FilterBank(taps=taps), support, x))
        exact = stacked_taps_norm(taps) * stacked_shift_norm(support, K)
        assert out <= exact * signal_norm(x) * (1.0 + 1e-12)
        assumed = stacked_shift_norm_bound(inf_norm(support), K)
        assert exact <= stacked_taps_norm(taps) * assumed * (1.0 + 1e-12)


def test_bank_properties() -> None:
    bank = FilterBank.zeros(2, 3, 5)
    assert (bank.k_order, bank.in_features, bank.out_features) == (2, 3, 5)


@pytest.mark.parametrize(
    "blocks",
    [
        [],
        [np.zeros((2, 2)), np.zeros((3, 2))],
    ],
)
def test_from_blocks_validation(blocks) -> None:
    with pytest.raises(DimensionMismatchError):
        FilterBank.from_blocks(blocks)


def test_bank_rejects_flat_taps() -> None:
    with pytest.raises(DimensionMismatchError):
        FilterBank(taps=np.zeros((2, 2)))


def test_filter_rejects_wrong_signal() -> None:
    bank = FilterBank.zeros(1, 3, 2)
    with pytest.raises(DimensionMismatchError):
        filter_apply(bank, np.zeros((4, 4)), np.zeros((4, 2)))
    with pytest.raises(DimensionMismatchError):
        filter_apply(bank, np.zeros((4, 4)), np.zeros((3, 3)))


def test_stacked_taps_norm() -> None:
    taps = np.zeros((2, 2, 2))
    taps[0] = [[1.0, 0.5], [-2.0, 0.0]]
    taps[1] = [[0.0, 1.0], [0.0, -1.0]]
    # Column sums: tap 0 gives 3 and 0.5, tap 1 gives 0 and 2.
    assert stacked_taps_norm(taps) == 3.0
    assert np.array_equal(tap_column_sums(taps), [[3.0, 0.5], [0.0, 2.0]])
    assert stacked_taps_norm(np.zeros((0, 2, 2))) == 0.0


def test_history_keeps_last_entries() -> None:
    history = SignalHistory(1)
    assert not history.is_warm
    assert history.latest_time is None
    for t in range(3):
        history.push(t, np.full((2, 1), float(t)), np.eye(2))
    assert len(history) == 2
    assert history.is_warm
    assert history.latest_time == 2
    assert [s[0, 0] for s in history.signals()] == [1.0, 2.0]


def test_history_rejects_stale_timestamps() -> None:
    history = SignalHistory(2)
    history.push(5, np.zeros((2, 1)), np.eye(2))
    with pytest.raises(ValueError):
        history.push(5, np.zeros((2, 1)), np.eye(2))


def test_history_rejects_negative_order() -> None:
    with pytest.raises(ValueError):
        SignalHistory(-1)


@pytest.mark.parametrize("K", [0, 1, 2, 3])
def test_delayed_filter_collapses_on_static_support(rng, K) -> None:
    support = _random_support(rng)
    x = rng.uniform(-1.0, 1.0, size=(4, 3))
    bank = FilterBank(taps=rng.normal(size=(K + 1, 3, 2)))
    history = SignalHistory.filled(K, x, support, last_time=10)
    assert np.array_equal(
        delayed_filter_apply(bank, history), filter_apply(bank, support, x)
    )


def test_delayed_filter_with_no_shift_taps(rng) -> None:
    bank = FilterBank(taps=rng.normal(size=(1, 2, 2)))
    history = SignalHistory(0)
    x = rng.normal(size=(3, 2))
    history.push(0, x, _random_support(rng, 3))
    assert np.array_equal(delayed_filter_apply(bank, history), x @ bank.taps[0])


def test_delayed_filter_matches_support_products(rng) -> None:
    supports = [_random_support(rng, 3) for _ in range(3)]
    signals = [rng.normal(size=(3, 2)) for _ in range(3)]
    bank = FilterBank(taps=rng.normal(size=(3, 2, 2)))
    history = SignalHistory(2)
    for t in range(3):
        history.push(t, signals[t], supports[t])
    _, s1, s2 = supports
    x0, x1, x2 = signals
    # Newest support outermost: tap k reads x(t−k) through S(t)…S(t−k+1).
    expected = (
        x2 @ bank.taps[0] + s2 @ x1 @ bank.taps[1] + s2 @ s1 @ x0 @ bank.taps[2]
    )
    assert np.allclose(delayed_filter_apply(bank, history), expected)


def test_delayed_filter_needs_warm_history(rng) -> None:
    bank = FilterBank.zeros(2, 2, 2)
    history = SignalHistory(2)
    history.push(0, np.zeros((3, 2)), np.eye(3))
    with pytest.raises(InsufficientHistoryError, match="insufficient history"):
        delayed_filter_apply(bank, history)
