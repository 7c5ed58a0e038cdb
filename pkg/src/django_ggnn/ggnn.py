#
# ggnn.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Gated graph recurrent layers, deep stacks with encoder and readout, and the
JSON parameter document.

Every forward function works on plain arrays and on recorded `Var` parameters
alike, so the same code drives simulation and training.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from django_ggnn import conf, tape
from django_ggnn.exceptions import (
    DimensionMismatchError,
    InputOutOfBoundsError,
    StateCountMismatchError,
    WeightsFormatError,
)
from django_ggnn.filters import FilterBank, SignalHistory, delayed_filter_apply
from django_ggnn.graph import SupportKind, SupportMatrix, as_matrix
from django_ggnn.tape import Operand, value_of

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT = "django-ggnn/weights"
WEIGHTS_VERSION = 1
STATE_BANKS = ("A", "A_hat", "A_tilde")
INPUT_BANKS = ("B", "B_hat", "B_tilde")
BANK_NAMES = ("A", "B", "A_hat", "B_hat", "A_tilde", "B_tilde")
BIAS_NAMES = ("b", "b_hat", "b_tilde")


@dataclass(frozen=True, eq=False)
class Dense:
    """An affine map z ↦ z W + c shared by every agent."""

    weight: Any
    bias: Any

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.bias.shape != (  # noqa: PLR2004
            self.weight.shape[1],
        ):
            msg = (
                f"Dense weight {self.weight.shape} and bias {self.bias.shape} "
                "do not agree."
            )
            raise DimensionMismatchError(msg)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True, eq=False)
class LayerParams:
    """Filter banks and biases of one gated recurrent layer.

    A, Â, Ã act on the N×F state and B, B̂, B̃ on the N×G input. The biases are
    F-vectors shared by every agent.
    """

    A: FilterBank
    B: FilterBank
    A_hat: FilterBank
    B_hat: FilterBank
    A_tilde: FilterBank
    B_tilde: FilterBank
    b: Any
    b_hat: Any
    b_tilde: Any

    def __post_init__(self) -> None:
        orders = {getattr(self, name).k_order for name in BANK_NAMES}
        if len(orders) != 1:
            msg = f"All banks of a layer must share K, got {sorted(orders)}."
            raise DimensionMismatchError(msg)
        features = self.A.out_features
        for name in STATE_BANKS:
            bank = getattr(self, name)
            if bank.in_features != features or bank.out_features != features:
                msg = f"Bank {name} must map {features} state features to {features}."
                raise DimensionMismatchError(msg)
        width = self.B.in_features
        for name in INPUT_BANKS:
            bank = getattr(self, name)
            if bank.in_features != width or bank.out_features != features:
                msg = f"Bank {name} must map {width} input features to {features}."
                raise DimensionMismatchError(msg)
        for name in BIAS_NAMES:
            if getattr(self, name).shape != (features,):
                msg = f"Bias {name} must have length {features}."
                raise DimensionMismatchError(msg)

    @classmethod
    def zeros(cls, K: int, state_features: int, input_features: int) -> "LayerParams":
        """A layer whose banks and biases are all zero."""
        banks = {
            name: FilterBank.zeros(K, state_features, state_features)
            for name in STATE_BANKS
        } | {
            name: FilterBank.zeros(K, input_features, state_features)
            for name in INPUT_BANKS
        }
        biases = {name: np.zeros(state_features) for name in BIAS_NAMES}
        return cls(**banks, **biases)

    @property
    def k_order(self) -> int:
        return self.A.k_order

    @property
    def state_features(self) -> int:
        return self.A.out_features

    @property
    def input_features(self) -> int:
        return self.B.in_features


@dataclass(frozen=True, eq=False)
class LayerState:
    """The N×F state of one layer. Every entry lies in [−1, 1]."""

    x: Any

    @classmethod
    def zeros(cls, n_agents: int, features: int) -> "LayerState":
        return cls(x=np.zeros((n_agents, features)))


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """A deep gated network with its encoder and readout.

    Attributes:
        encoder (tuple[Dense, ...]): Affine maps, each followed by tanh, that
            squash the raw agent features into the unit ball.
        layers (tuple[LayerParams, ...]): The recurrent stack; layer i reads the
            updated state of layer i−1.
        readout (FilterBank): Output graph filter Y applied to the last state.
        readout_bias (np.ndarray): Bias b_y added after the readout filter.
        head (tuple[Dense, ...]): Affine maps producing the control. Hidden maps
            use tanh and the last one saturation·tanh.
        support_kind (SupportKind): The support the network runs on.
        saturation (float): Componentwise control limit in m/s².
    """

    encoder: tuple[Dense, ...]
    layers: tuple[LayerParams, ...]
    readout: FilterBank
    readout_bias: Any
    head: tuple[Dense, ...] = ()
    support_kind: SupportKind = "normalized_laplacian"
    saturation: float = 5.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder", tuple(self.encoder))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "head", tuple(self.head))
        if not self.layers:
            msg = "A network needs at least one recurrent layer."
            raise DimensionMismatchError(msg)
        if self.saturation <= 0:
            msg = f"The control saturation must be positive, got {self.saturation}."
            raise ValueError(msg)
        _check_chain("encoder", self.encoder)
        _check_chain("head", self.head)
        encoded = self.encoder[-1].out_features if self.encoder else None
        if encoded is not None and encoded != self.layers[0].input_features:
            msg = "The encoder output width must match the first layer input width."
            raise DimensionMismatchError(msg)
        for i in range(1, len(self.layers)):
            if self.layers[i].input_features != self.layers[i - 1].state_features:
                msg = f"Layer {i} must read the state of layer {i - 1}."
                raise DimensionMismatchError(msg)
        if self.readout.in_features != self.layers[-1].state_features:
            msg = "The readout filter must read the last layer state."
            raise DimensionMismatchError(msg)
        if self.readout_bias.shape != (self.readout.out_features,):
            msg = "The readout bias must match the readout width."
            raise DimensionMismatchError(msg)
        if self.head and self.head[0].in_features != self.readout.out_features:
            msg = "The head input width must match the readout width."
            raise DimensionMismatchError(msg)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def k_order(self) -> int:
        return self.layers[0].k_order

    @property
    def in_features(self) -> int:
        if self.encoder:
            return self.encoder[0].in_features
        return self.layers[0].input_features

    def zero_states(self, n_agents: int) -> list[LayerState]:
        return [LayerState.zeros(n_agents, p.state_features) for p in self.layers]

    def to_dict(self) -> dict[str, Any]:
        """The parameter document: shapes, row-major data and metadata."""
        arrays = named_arrays(self)
        return {
            "format": WEIGHTS_FORMAT,
            "version": WEIGHTS_VERSION,
            "metadata": {
                "K": self.k_order,
                "F": [p.state_features for p in self.layers],
                "M": self.n_layers,
                "encoder": len(self.encoder),
                "head": len(self.head),
                "support_kind": self.support_kind,
                "saturation": self.saturation,
            },
            "arrays": {
                name: {"shape": list(array.shape), "data": array.ravel().tolist()}
                for name, array in arrays.items()
            },
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "NetworkParams":
        """Rebuild a network from its parameter document.

        Raises:
            WeightsFormatError: If the document is not a valid parameter document.
        """
        try:
            if document.get("format") != WEIGHTS_FORMAT:
                msg = f"Not a {WEIGHTS_FORMAT} document."
                raise WeightsFormatError(msg)
            if document.get("version") != WEIGHTS_VERSION:
                msg = f"Unsupported weights version {document.get('version')}."
                raise WeightsFormatError(msg)
            metadata = document["metadata"]
            arrays = {
                name: np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
                for name, entry in document["arrays"].items()
            }
            return _assemble(
                arrays,
                n_encoder=int(metadata["encoder"]),
                n_layers=int(metadata["M"]),
                n_head=int(metadata["head"]),
                support_kind=metadata["support_kind"],
                saturation=float(metadata["saturation"]),
            )
        except WeightsFormatError:
            raise
        except (AttributeError, KeyError, TypeError, ValueError) as err:
            msg = f"Malformed parameter document: {err!r}"
            raise WeightsFormatError(msg) from err


def _check_chain(label: str, maps: Sequence[Dense]) -> None:
    for i in range(1, len(maps)):
        if maps[i].in_features != maps[i - 1].out_features:
            msg = f"{label} map {i} does not accept the output of map {i - 1}."
            raise DimensionMismatchError(msg)


def named_arrays(net: NetworkParams) -> dict[str, np.ndarray]:
    """Every parameter of the network keyed by a dotted name, as plain arrays."""
    arrays: dict[str, np.ndarray] = {}
    for i, dense in enumerate(net.encoder):
        arrays[f"encoder.{i}.weight"] = value_of(dense.weight)
        arrays[f"encoder.{i}.bias"] = value_of(dense.bias)
    for i, layer in enumerate(net.layers):
        for name in BANK_NAMES:
            arrays[f"layers.{i}.{name}"] = value_of(getattr(layer, name).taps)
        for name in BIAS_NAMES:
            arrays[f"layers.{i}.{name}"] = value_of(getattr(layer, name))
    arrays["readout"] = value_of(net.readout.taps)
    arrays["readout_bias"] = value_of(net.readout_bias)
    for i, dense in enumerate(net.head):
        arrays[f"head.{i}.weight"] = value_of(dense.weight)
        arrays[f"head.{i}.bias"] = value_of(dense.bias)
    return arrays


def _assemble(
    arrays: Mapping[str, Any],
    *,
    n_encoder: int,
    n_layers: int,
    n_head: int,
    support_kind: SupportKind,
    saturation: float,
) -> NetworkParams:
    expected = (
        {f"encoder.{i}.{part}" for i in range(n_encoder) for part in ("weight", "bias")}
        | {
            f"layers.{i}.{name}"
            for i in range(n_layers)
            for name in BANK_NAMES + BIAS_NAMES
        }
        | {"readout", "readout_bias"}
        | {f"head.{i}.{part}" for i in range(n_head) for part in ("weight", "bias")}
    )
    if set(arrays) != expected:
        msg = f"Unexpected parameter names: {sorted(set(arrays) ^ expected)}"
        raise KeyError(msg)
    encoder = tuple(
        Dense(weight=arrays[f"encoder.{i}.weight"], bias=arrays[f"encoder.{i}.bias"])
        for i in range(n_encoder)
    )
    layers = tuple(
        LayerParams(
            **{
                name: FilterBank(taps=arrays[f"layers.{i}.{name}"])
                for name in BANK_NAMES
            },
            **{name: arrays[f"layers.{i}.{name}"] for name in BIAS_NAMES},
        )
        for i in range(n_layers)
    )
    head = tuple(
        Dense(weight=arrays[f"head.{i}.weight"], bias=arrays[f"head.{i}.bias"])
        for i in range(n_head)
    )
    return NetworkParams(
        encoder=encoder,
        layers=layers,
        readout=FilterBank(taps=arrays["readout"]),
        readout_bias=arrays["readout_bias"],
        head=head,
        support_kind=support_kind,
        saturation=saturation,
    )


def with_arrays(net: NetworkParams, arrays: Mapping[str, Any]) -> NetworkParams:
    """A copy of `net` whose parameters are replaced by `arrays`, which must use
    the names of `named_arrays`. Values may be recorded `Var` instances."""
    return _assemble(
        arrays,
        n_encoder=len(net.encoder),
        n_layers=net.n_layers,
        n_head=len(net.head),
        support_kind=net.support_kind,
        saturation=net.saturation,
    )


def init_network(
    rng: np.random.Generator,
    *,
    in_features: int = 10,
    out_features: int = 2,
    state_features: int | None = None,
    filter_taps: int | None = None,
    layers: int | None = None,
    hidden_width: int | None = None,
    support_kind: SupportKind | None = None,
    saturation: float | None = None,
) -> NetworkParams:
    """Draw a fresh network. Missing sizes come from the settings.

    Weights are uniform in ±1/√fan_in, where a filter bank's fan-in counts every
    tap. Gate and state biases start at zero.
    """
    F = state_features if state_features is not None else conf.get_state_features()
    K = filter_taps if filter_taps is not None else conf.get_filter_taps()
    M = layers if layers is not None else conf.get_layers()
    hidden = hidden_width if hidden_width is not None else conf.get_hidden_width()
    kind = support_kind or conf.get_support_kind()
    limit = saturation if saturation is not None else conf.get_control_saturation()
    if min(F, M, hidden) < 1 or K < 0:
        msg = "Network sizes must be positive and the filter order nonnegative."
        raise ValueError(msg)

    def dense(n_in: int, n_out: int) -> Dense:
        bound = 1.0 / np.sqrt(n_in)
        return Dense(
            weight=rng.uniform(-bound, bound, size=(n_in, n_out)),
            bias=rng.uniform(-bound, bound, size=n_out),
        )

    def bank(n_in: int, n_out: int) -> FilterBank:
        bound = 1.0 / np.sqrt((K + 1) * n_in)
        return FilterBank(taps=rng.uniform(-bound, bound, size=(K + 1, n_in, n_out)))

    recurrent = []
    for _ in range(M):
        banks = {name: bank(F, F) for name in BANK_NAMES}
        biases = {name: np.zeros(F) for name in BIAS_NAMES}
        recurrent.append(LayerParams(**banks, **biases))
    net = NetworkParams(
        encoder=(dense(in_features, hidden), dense(hidden, F)),
        layers=tuple(recurrent),
        readout=bank(F, F),
        readout_bias=np.zeros(F),
        head=(dense(F, hidden), dense(hidden, out_features)),
        support_kind=kind,  # type: ignore[arg-type]
        saturation=limit,
    )
    logger.debug("Initialized a network with M=%s, F=%s, K=%s.", M, F, K)
    return net


def _check_unit_ball(label: str, value: Operand) -> None:
    array = value_of(value)
    if array.size and float(np.max(np.abs(array))) > 1.0:
        msg = (
            f"input out of unit ball: ‖{label}‖∞ = {float(np.max(np.abs(array)))}"
        )
        raise InputOutOfBoundsError(msg)


def _gated_update(
    p: LayerParams, filtered: Mapping[str, Operand]
) -> tuple[Operand, Operand, Operand]:
    q_tilde = tape.sigmoid(
        tape.add(tape.add(filtered["A_tilde"], filtered["B_tilde"]), p.b_tilde)
    )
    q_hat = tape.sigmoid(
        tape.add(tape.add(filtered["A_hat"], filtered["B_hat"]), p.b_hat)
    )
    pre_activation = tape.add(
        tape.add(tape.mul(q_hat, filtered["A"]), tape.mul(q_tilde, filtered["B"])),
        p.b,
    )
    return tape.tanh(pre_activation), q_hat, q_tilde


def layer_forward(
    p: LayerParams,
    support: SupportMatrix | np.ndarray,
    state: LayerState,
    u: Operand,
    *,
    check_bounds: bool = True,
) -> tuple[LayerState, tuple[Operand, Operand]]:
    """One step of the gated recurrence.

    q̃ = σ(Ã_S(x) + B̃_S(u) + b̃), q̂ = σ(Â_S(x) + B̂_S(u) + b̂) and
    x⁺ = tanh(q̂ ∘ A_S(x) + q̃ ∘ B_S(u) + b), where X_S(z) = Σ_k S^k z X_k.

    Returns:
        tuple: The next state and the gates (q̂, q̃).

    Raises:
        InputOutOfBoundsError: If the state or input leaves [−1, 1].
        DimensionMismatchError: If the shapes do not agree.
    """
    entries = as_matrix(support)
    if check_bounds:
        _check_unit_ball("u", u)
        _check_unit_ball("x", state.x)
    for label, value, width in (
        ("state", state.x, p.state_features),
        ("input", u, p.input_features),
    ):
        shape = value_of(value).shape
        if len(shape) != 2 or shape != (entries.shape[0], width):  # noqa: PLR2004
            msg = f"Expected a {entries.shape[0]}×{width} {label}, got {shape}."
            raise DimensionMismatchError(msg)
    filtered = {
        name: tape.graph_filter(entries, state.x, getattr(p, name).taps)
        for name in STATE_BANKS
    } | {
        name: tape.graph_filter(entries, u, getattr(p, name).taps)
        for name in INPUT_BANKS
    }
    x_next, q_hat, q_tilde = _gated_update(p, filtered)
    return LayerState(x=x_next), (q_hat, q_tilde)


def delayed_forward(
    p: LayerParams,
    state_history: SignalHistory,
    input_history: SignalHistory,
    *,
    check_bounds: bool = True,
) -> LayerState:
    """One step of the recurrence with every filter unit-delayed.

    The newest entries of the histories are the current state and input.

    Raises:
        InsufficientHistoryError: If either history is cold.
        InputOutOfBoundsError: If a buffered signal leaves [−1, 1].
    """
    if check_bounds:
        for signal in state_history.signals():
            _check_unit_ball("x", signal)
        for signal in input_history.signals():
            _check_unit_ball("u", signal)
    filtered = {
        name: delayed_filter_apply(getattr(p, name), state_history)
        for name in STATE_BANKS
    } | {
        name: delayed_filter_apply(getattr(p, name), input_history)
        for name in INPUT_BANKS
    }
    x_next, _, _ = _gated_update(p, filtered)
    return LayerState(x=x_next)


def encode(net: NetworkParams, u_raw: Operand) -> Operand:
    """Squash raw agent features into the unit ball."""
    u = u_raw
    for dense in net.encoder:
        u = tape.tanh(tape.affine(u, dense.weight, dense.bias))
    return u


def _head(net: NetworkParams, z: Operand) -> Operand:
    if not net.head:
        return tape.clip(z, -net.saturation, net.saturation)
    last = len(net.head) - 1
    for i, dense in enumerate(net.head):
        z = tape.tanh(tape.affine(z, dense.weight, dense.bias))
        if i == last:
            z = tape.scale(z, net.saturation)
    return z


def readout(
    net: NetworkParams, support: SupportMatrix | np.ndarray, x: Operand
) -> Operand:
    """Control from the last layer state: head(Y_S(x) + b_y)."""
    filtered = tape.graph_filter(as_matrix(support), x, net.readout.taps)
    z = tape.add(filtered, net.readout_bias)
    return _head(net, z)


def deep_forward(
    net: NetworkParams,
    support: SupportMatrix | np.ndarray,
    states: Sequence[LayerState],
    u_raw: Operand,
    *,
    check_bounds: bool = True,
) -> tuple[Operand, list[LayerState]]:
    """One step of the deep network: encode, run every layer on the updated state
    of the previous one, and read the control out of the updated last state.

    Raises:
        StateCountMismatchError: If `states` does not hold one state per layer.
        ValueError: If the raw features are not finite.
    """
    if len(states) != net.n_layers:
        msg = f"Expected {net.n_layers} layer states, got {len(states)}."
        raise StateCountMismatchError(msg)
    if not np.all(np.isfinite(value_of(u_raw))):
        msg = "Raw agent features must be finite."
        raise ValueError(msg)
    entries = as_matrix(support)
    u = encode(net, u_raw)
    new_states = []
    for p, state in zip(net.layers, states, strict=True):
        next_state, _ = layer_forward(p, entries, state, u, check_bounds=check_bounds)
        new_states.append(next_state)
        u = next_state.x
    return readout(net, entries, u), new_states


@dataclass(eq=False)
class DelayedStack:
    """Signal histories of a deep network running with unit-delayed filters."""

    states: list[LayerState]
    state_histories: list[SignalHistory]
    input_histories: list[SignalHistory]
    readout_history: SignalHistory

    @classmethod
    def warm(
        cls,
        net: NetworkParams,
        support: SupportMatrix | np.ndarray,
        states: Sequence[LayerState],
        u_raw: np.ndarray,
        *,
        last_time: int,
    ) -> "DelayedStack":
        """Fill every history with the signals a delay-free step from `states`
        would exchange, as if the swarm had been frozen up to `last_time`."""
        if len(states) != net.n_layers:
            msg = f"Expected {net.n_layers} layer states, got {len(states)}."
            raise StateCountMismatchError(msg)
        entries = as_matrix(support)
        u = value_of(encode(net, u_raw))
        state_histories, input_histories = [], []
        for p, state in zip(net.layers, states, strict=True):
            state_histories.append(
                SignalHistory.filled(p.k_order, state.x, entries, last_time=last_time)
            )
            input_histories.append(
                SignalHistory.filled(p.k_order, u, entries, last_time=last_time)
            )
            next_state, _ = layer_forward(p, entries, state, u)
            u = value_of(next_state.x)
        return cls(
            states=list(states),
            state_histories=state_histories,
            input_histories=input_histories,
            readout_history=SignalHistory.filled(
                net.readout.k_order, u, entries, last_time=last_time
            ),
        )


def deep_delayed_forward(
    net: NetworkParams,
    stack: DelayedStack,
    support: SupportMatrix | np.ndarray,
    u_raw: np.ndarray,
    *,
    time: int,
) -> tuple[np.ndarray, list[LayerState]]:
    """`deep_forward` with unit-delayed filters. The histories in `stack` receive
    the signals of step `time` and the stack keeps the new states."""
    entries = as_matrix(support)
    u = value_of(encode(net, u_raw))
    new_states = []
    for i, p in enumerate(net.layers):
        stack.state_histories[i].push(time, stack.states[i].x, entries)
        stack.input_histories[i].push(time, u, entries)
        next_state = delayed_forward(
            p, stack.state_histories[i], stack.input_histories[i]
        )
        new_states.append(next_state)
        u = next_state.x
    stack.readout_history.push(time, u, entries)
    z = delayed_filter_apply(net.readout, stack.readout_history) + value_of(
        net.readout_bias
    )
    stack.states = new_states
    return value_of(_head(net, z)), new_states


def gate_bounds(p: LayerParams, s_K_norm: float) -> tuple[Any, Any]:
    """Upper bounds on every gate activation over the unit ball.

    σ_q̂ = σ(s_K (‖Â‖∞ + ‖B̂‖∞) + ‖b̂‖∞) and σ_q̃ likewise with Ã, B̃, b̃.

    Args:
        p (LayerParams): The layer.
        s_K_norm (float): A bound on ‖[I, S, …, S^K]‖∞; at least 1.

    Returns:
        tuple: (σ_q̂, σ_q̃), floats for plain parameters.

    Raises:
        ValueError: If `s_K_norm` is below one.
    """
    if s_K_norm < 1:
        msg = f"The stacked support bound is at least one, got {s_K_norm}."
        raise ValueError(msg)
    sigma_hat = tape.sigmoid(
        s_K_norm * (tape.tap_norm(p.A_hat.taps) + tape.tap_norm(p.B_hat.taps))
        + tape.max_abs(p.b_hat)
    )
    sigma_tilde = tape.sigmoid(
        s_K_norm * (tape.tap_norm(p.A_tilde.taps) + tape.tap_norm(p.B_tilde.taps))
        + tape.max_abs(p.b_tilde)
    )
    return tape.scalar(sigma_hat), tape.scalar(sigma_tilde)
