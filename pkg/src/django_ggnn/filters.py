#
# filters.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Graph filter banks and their unit-delayed variant over time-varying supports.

A filter bank realizes Σ_k S^k x H_k. The powers of S are never formed: every
tap is reached by repeated one-hop shifts, which is what the agents compute
locally by exchanging values with their neighbors.
"""

from collections import deque
from collections.abc import Iterator
from dataclasses import dataclass
from typing import Any

import numpy as np

from django_ggnn.exceptions import DimensionMismatchError, InsufficientHistoryError
from django_ggnn.graph import SupportMatrix, as_matrix


def iterated_shifts(support: np.ndarray, x: np.ndarray, K: int) -> list[np.ndarray]:
    """Return [x, S x, S(S x), …] up to K shifts."""
    shifts = [x]
    for _ in range(K):
        shifts.append(support @ shifts[-1])
    return shifts


def contract_taps(shifts: list[np.ndarray], taps: np.ndarray) -> np.ndarray:
    """Σ_k z_k H_k, accumulated in increasing tap order."""
    out = shifts[0] @ taps[0]
    for k in range(1, len(shifts)):
        out = out + shifts[k] @ taps[k]
    return out


@dataclass(frozen=True, eq=False)
class FilterBank:
    """The K+1 weight blocks of one graph filter.

    Attributes:
        taps: Array of shape (K+1, G_in, F_out). May also be a recorded `Var` of
            that shape while gradients are being taken.
    """

    taps: Any

    def __post_init__(self) -> None:
        if self.taps.ndim != 3:  # noqa: PLR2004
            msg = (
                "Filter taps must be stacked as (K+1, G_in, F_out), "
                f"got shape {self.taps.shape}."
            )
            raise DimensionMismatchError(msg)
        if self.taps.shape[0] < 1:
            msg = "A filter bank needs at least one tap."
            raise DimensionMismatchError(msg)

    @classmethod
    def from_blocks(cls, blocks: list[np.ndarray]) -> "FilterBank":
        """Build a bank from separate H_k blocks.

        Raises:
            DimensionMismatchError: If the blocks do not share their dimensions.
        """
        arrays = [np.asarray(block, dtype=float) for block in blocks]
        if not arrays:
            msg = "A filter bank needs at least one tap."
            raise DimensionMismatchError(msg)
        shapes = {array.shape for array in arrays}
        if len(shapes) != 1:
            msg = f"All taps must share dimensions, got {sorted(shapes)}."
            raise DimensionMismatchError(msg)
        return cls(taps=np.stack(arrays))

    @classmethod
    def zeros(cls, K: int, in_features: int, out_features: int) -> "FilterBank":
        return cls(taps=np.zeros((K + 1, in_features, out_features)))

    @property
    def k_order(self) -> int:
        return self.taps.shape[0] - 1

    @property
    def in_features(self) -> int:
        return self.taps.shape[1]

    @property
    def out_features(self) -> int:
        return self.taps.shape[2]


def _check_signal(bank: FilterBank, entries: np.ndarray, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[0] != entries.shape[0]:  # noqa: PLR2004
        msg = (
            f"Expected a signal with {entries.shape[0]} rows, got shape {x.shape}."
        )
        raise DimensionMismatchError(msg)
    if x.shape[1] != bank.in_features:
        msg = (
            f"The bank expects {bank.in_features} input features, "
            f"got {x.shape[1]}."
        )
        raise DimensionMismatchError(msg)


def filter_apply(
    bank: FilterBank, support: SupportMatrix | np.ndarray, x: np.ndarray
) -> np.ndarray:
    """Apply a graph filter: Σ_{k=0..K} S^k x H_k.

    Args:
        bank (FilterBank): The taps H_0..H_K.
        support (SupportMatrix | np.ndarray): The N×N shift operator.
        x (np.ndarray): The N×G_in input signal.

    Returns:
        np.ndarray: The N×F_out filtered signal.

    Raises:
        DimensionMismatchError: If the shapes do not agree.
    """
    entries = as_matrix(support)
    x = np.asarray(x, dtype=float)
    _check_signal(bank, entries, x)
    taps = np.asarray(bank.taps, dtype=float)
    return contract_taps(iterated_shifts(entries, x, bank.k_order), taps)


def tap_column_sums(taps: np.ndarray) -> np.ndarray:
    """Absolute column sums Σ_g |H_k[g, f]| of every tap, shape (K+1, F).

    Their maximum is the induced ∞-norm of [H_0ᵀ; …; H_Kᵀ], the constant for
    which ‖x H_k‖∞ ≤ ‖x‖∞ · norm with the largest-entry signal norm.
    """
    return np.abs(np.asarray(taps, dtype=float)).sum(axis=1)


def stacked_taps_norm(taps: np.ndarray) -> float:
    """Induced ∞-norm of [H_0ᵀ; …; H_Kᵀ]; zero for an empty stack."""
    if np.size(taps) == 0:
        return 0.0
    return float(tap_column_sums(taps).max())


@dataclass(frozen=True, eq=False)
class _HistoryEntry:
    time: int
    signal: np.ndarray
    support: np.ndarray


class SignalHistory:
    """Ring buffer of the last K+1 timestamped signals and supports.

    Each entry pairs the signal x(t) with the support S(t) in force when it was
    received. The support of the oldest entry is never used by a delayed filter.
    """

    def __init__(self, K: int) -> None:
        if K < 0:
            msg = f"The filter order must be nonnegative, got {K}."
            raise ValueError(msg)
        self.K = K
        self._entries: deque[_HistoryEntry] = deque(maxlen=K + 1)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[_HistoryEntry]:
        return iter(self._entries)

    @property
    def is_warm(self) -> bool:
        return len(self._entries) == self.K + 1

    @property
    def latest_time(self) -> int | None:
        if not self._entries:
            return None
        return self._entries[-1].time

    def push(self, time: int, signal: Any, support: SupportMatrix | np.ndarray) -> None:
        """Append a new signal; the oldest one falls out once the buffer is full.

        Raises:
            ValueError: If `time` does not come strictly after the newest entry.
        """
        latest = self.latest_time
        if latest is not None and time <= latest:
            msg = f"History timestamps must increase, got {time} after {latest}."
            raise ValueError(msg)
        self._entries.append(
            _HistoryEntry(
                time=time,
                signal=np.asarray(signal, dtype=float),
                support=as_matrix(support),
            )
        )

    @classmethod
    def filled(
        cls,
        K: int,
        signal: np.ndarray,
        support: SupportMatrix | np.ndarray,
        *,
        last_time: int,
    ) -> "SignalHistory":
        """A warm history holding the same signal and support at every slot,
        ending at `last_time`."""
        history = cls(K)
        for time in range(last_time - K, last_time + 1):
            history.push(time, signal, support)
        return history

    def signals(self) -> list[np.ndarray]:
        """Signals from oldest to newest."""
        return [entry.signal for entry in self._entries]

    def supports(self) -> list[np.ndarray]:
        """Supports from oldest to newest."""
        return [entry.support for entry in self._entries]


def delayed_filter_apply(bank: FilterBank, history: SignalHistory) -> np.ndarray:
    """Apply a unit-delayed filter over time-varying supports.

    Tap k acts on the signal received k steps ago, carried forward by the k
    supports that followed it, newest outermost:
    S(t) S(t−1) … S(t−k+1) x(t−k) H_k.

    With a static support and a constant history the result is bitwise equal to
    `filter_apply`, because the same shifts are performed in the same order.

    Raises:
        InsufficientHistoryError: If fewer than K+1 signals are buffered.
        DimensionMismatchError: If the buffered signals do not fit the bank.
    """
    K = bank.k_order
    if len(history) < K + 1:
        msg = (
            f"insufficient history: a filter of order {K} needs {K + 1} "
            f"signals, {len(history)} are buffered."
        )
        raise InsufficientHistoryError(msg)
    signals = history.signals()[-(K + 1) :]
    supports = history.supports()[-(K + 1) :]
    newest = len(signals) - 1
    _check_signal(bank, supports[newest], signals[newest])
    shifts = []
    for k in range(K + 1):
        z = signals[newest - k]
        for j in range(k - 1, -1, -1):
            z = supports[newest - j] @ z
        shifts.append(z)
    return contract_taps(shifts, np.asarray(bank.taps, dtype=float))
