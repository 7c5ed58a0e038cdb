#
# tape.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""A minimal reverse-mode gradient engine.

Every primitive in this module accepts plain arrays or `Var` instances. With plain
arrays it simply computes the result with numpy, so the forward code of the
network is written once. As soon as one operand is a `Var`, the result is
recorded on that operand's `Tape` together with its vector-Jacobian product, and
`Tape.gradient` replays the records backwards.
"""

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any, Union

import numpy as np

from django_ggnn.exceptions import NonFiniteValueError
from django_ggnn.filters import contract_taps, iterated_shifts, tap_column_sums

Operand = Union["Var", np.ndarray, float]
VJP = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class _Record:
    name: str
    parents: tuple[int | None, ...]
    vjp: VJP | None


class Var:
    """A value recorded on a tape.

    Attributes:
        value (np.ndarray): The forward value.
        tape (Tape): The tape holding the operation that produced the value.
        index (int): Position of that operation on the tape.
    """

    __slots__ = ("index", "tape", "value")
    # ndarray operators defer to the reflected Var operators.
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, tape: "Tape", index: int) -> None:
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self) -> str:  # no cov
        return f"Var(index={self.index}, shape={self.value.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __add__(self, other: Operand) -> "Var":
        return add(self, other)  # type: ignore[return-value]

    def __radd__(self, other: Operand) -> "Var":
        return add(other, self)  # type: ignore[return-value]

    def __sub__(self, other: Operand) -> "Var":
        return sub(self, other)  # type: ignore[return-value]

    def __rsub__(self, other: Operand) -> "Var":
        return sub(other, self)  # type: ignore[return-value]

    def __mul__(self, other: Operand) -> "Var":
        return mul(self, other)  # type: ignore[return-value]

    def __rmul__(self, other: Operand) -> "Var":
        return mul(other, self)  # type: ignore[return-value]

    def __neg__(self) -> "Var":
        return scale(self, -1.0)  # type: ignore[return-value]

    def __truediv__(self, other: float) -> "Var":
        return scale(self, 1.0 / other)  # type: ignore[return-value]


class Tape:
    """An append-only record of primitive operations."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def watch(self, value: np.ndarray | float) -> Var:
        """Register a leaf whose gradient can be requested later."""
        array = np.array(value, dtype=float)
        return self._record("leaf", (), array, None)

    def _record(
        self, name: str, parents: Sequence[Any], value: np.ndarray, vjp: VJP | None
    ) -> Var:
        index = len(self.records)
        if not np.all(np.isfinite(value)):
            msg = f"Operation {index} ({name}) produced a non-finite value."
            raise NonFiniteValueError(msg, operation_index=index, operation=name)
        self.records.append(
            _Record(
                name=name,
                parents=tuple(p.index if isinstance(p, Var) else None for p in parents),
                vjp=vjp,
            )
        )
        return Var(value, self, index)

    def gradient(
        self, output: Var, wrt: Mapping[str, Var]
    ) -> dict[str, np.ndarray]:
        """Gradients of the scalar `output` with respect to the watched leaves.

        Leaves the output does not depend on get zero gradients.

        Raises:
            ValueError: If the output is not a scalar recorded on this tape.
            NonFiniteValueError: If a backward product is not finite.
        """
        if output.tape is not self:
            msg = "The output was not recorded on this tape."
            raise ValueError(msg)
        if output.value.size != 1:
            msg = f"Gradients need a scalar output, got shape {output.shape}."
            raise ValueError(msg)
        grads: list[np.ndarray | None] = [None] * len(self.records)
        grads[output.index] = np.ones_like(output.value)
        for index in range(output.index, -1, -1):
            record = self.records[index]
            upstream = grads[index]
            if upstream is None or record.vjp is None:
                continue
            for parent, grad in zip(record.parents, record.vjp(upstream), strict=True):
                if parent is None or grad is None:
                    continue
                if not np.all(np.isfinite(grad)):
                    msg = (
                        f"Backward pass through operation {index} ({record.name}) "
                        "produced a non-finite gradient."
                    )
                    raise NonFiniteValueError(
                        msg, operation_index=index, operation=record.name
                    )
                current = grads[parent]
                grads[parent] = grad if current is None else current + grad
            grads[index] = None
        result = {}
        for name, var in wrt.items():
            grad = grads[var.index]
            result[name] = np.zeros_like(var.value) if grad is None else grad
        return result


def value_of(x: Operand) -> np.ndarray:
    """The numeric value of an operand, detached from any tape."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=float)


def scalar(x: Operand) -> "Var | float":
    """Plain scalars come back as `float`; recorded ones stay on their tape."""
    if isinstance(x, Var):
        return x
    return float(value_of(x))


def _tape_of(*operands: Any) -> Tape | None:
    tape = None
    for operand in operands:
        if isinstance(operand, Var):
            if tape is None:
                tape = operand.tape
            elif operand.tape is not tape:
                msg = "Operands were recorded on different tapes."
                raise ValueError(msg)
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Operand, b: Operand) -> Operand:
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape._record(
        "add",
        (a, b),
        out,
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a: Operand, b: Operand) -> Operand:
    av, bv = value_of(a), value_of(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape._record(
        "sub",
        (a, b),
        out,
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a: Operand, b: Operand) -> Operand:
    """Hadamard product, with numpy broadcasting."""
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape._record(
        "mul",
        (a, b),
        out,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Operand, factor: float) -> Operand:
    av = value_of(a)
    out = factor * av
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record("scale", (a,), out, lambda g: (factor * g,))


def affine(x: Operand, weight: Operand, bias: Operand | None = None) -> Operand:
    """x·W + c, the bias broadcast over rows."""
    xv, wv = value_of(x), value_of(weight)
    out = xv @ wv
    if bias is not None:
        out = out + value_of(bias)
    tape = _tape_of(x, weight, bias)
    if tape is None:
        return out

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grads: tuple[np.ndarray | None, ...] = (g @ wv.T, xv.T @ g)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return tape._record("affine", parents, out, vjp)


def sigmoid(x: Operand) -> Operand:
    """Logistic function, evaluated as ½(1 + tanh(x/2)) to avoid overflow."""
    xv = value_of(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * xv))
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape._record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: Operand) -> Operand:
    xv = value_of(x)
    out = np.tanh(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape._record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def square(x: Operand) -> Operand:
    xv = value_of(x)
    out = xv * xv
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape._record("square", (x,), out, lambda g: (2.0 * xv * g,))


def total(x: Operand) -> Operand:
    """Sum of all entries."""
    xv = value_of(x)
    out = np.asarray(xv.sum())
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape._record("total", (x,), out, lambda g: (np.full_like(xv, g),))


def mean(x: Operand) -> Operand:
    xv = value_of(x)
    return scale(total(x), 1.0 / xv.size)


def clip(x: Operand, low: float, high: float) -> Operand:
    xv = value_of(x)
    out = np.clip(xv, low, high)
    tape = _tape_of(x)
    if tape is None:
        return out
    inside = (xv > low) & (xv < high)
    return tape._record("clip", (x,), out, lambda g: (g * inside,))


def positive_part(x: Operand) -> Operand:
    """max(0, x); the subgradient at the kink is zero."""
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape._record("positive_part", (x,), out, lambda g: (g * (xv > 0.0),))


def negative_part(x: Operand) -> Operand:
    """min(0, x); the subgradient at the kink is zero."""
    xv = value_of(x)
    out = np.minimum(xv, 0.0)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape._record("negative_part", (x,), out, lambda g: (g * (xv < 0.0),))


def max_abs(x: Operand) -> Operand:
    """Largest absolute entry. The gradient flows through the first maximizer."""
    xv = value_of(x)
    if xv.size == 0:
        return np.asarray(0.0)
    flat = int(np.argmax(np.abs(xv)))
    out = np.asarray(np.abs(xv.flat[flat]))
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad = np.zeros_like(xv)
        grad.flat[flat] = g * np.sign(xv.flat[flat])
        return (grad,)

    return tape._record("max_abs", (x,), out, vjp)


def tap_norm(taps: Operand) -> Operand:
    """Recorded `stacked_taps_norm` of the tap stack [H_0ᵀ; …; H_Kᵀ].

    The gradient flows through the first maximizing (k, f) of
    `tap_column_sums` in row-major order.
    """
    hv = value_of(taps)
    if hv.size == 0:
        return np.asarray(0.0)
    column_sums = tap_column_sums(hv)
    k, f = np.unravel_index(int(np.argmax(column_sums)), column_sums.shape)
    out = np.asarray(column_sums[k, f])
    tape = _tape_of(taps)
    if tape is None:
        return out

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad = np.zeros_like(hv)
        grad[k, :, f] = g * np.sign(hv[k, :, f])
        return (grad,)

    return tape._record("tap_norm", (taps,), out, vjp)


def graph_filter(support: np.ndarray, x: Operand, taps: Operand) -> Operand:
    """Σ_k S^k x H_k for a constant support, by iterated shifts."""
    xv, hv = value_of(x), value_of(taps)
    shifts = iterated_shifts(support, xv, hv.shape[0] - 1)
    out = contract_taps(shifts, hv)
    tape = _tape_of(x, taps)
    if tape is None:
        return out

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        d_taps = np.stack([z.T @ g for z in shifts])
        # Horner: Σ_k (Sᵀ)^k g H_kᵀ
        d_x = g @ hv[-1].T
        for k in range(hv.shape[0] - 2, -1, -1):
            d_x = support.T @ d_x + g @ hv[k].T
        return (d_x, d_taps)

    return tape._record("graph_filter", (x, taps), out, vjp)
