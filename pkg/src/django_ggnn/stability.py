#
# stability.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Closed-form stability certificates for gated graph networks.

The margins and gains are computed from weight norms alone. They hold on any
topology whose supports respect the assumed bounds: `s_bar` bounds ‖S‖∞ and
`s_K_bar` bounds ‖[I, S, …, S^K]‖∞. A layer is input-to-state stable (ISS)
when its margin 𝒜 ≤ 1 and incrementally ISS (δISS) when 𝒜_δ ≤ 1.

The margin functions accept recorded parameters as well, which is how the
training penalty gets its gradients.
"""

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from django_ggnn import conf, tape
from django_ggnn.exceptions import NoContractionCertificateError
from django_ggnn.ggnn import LayerParams, NetworkParams, gate_bounds
from django_ggnn.graph import (
    default_support_bound,
    signal_norm,
    stacked_shift_norm_bound,
)

logger = logging.getLogger(__name__)

DEFAULT_SLACK = 1e-9


def _check_bounds(s_bar: float, s_K_bar: float) -> None:
    if s_bar < 0:
        msg = f"The support bound must be nonnegative, got {s_bar}."
        raise ValueError(msg)
    if s_K_bar < 1:
        msg = f"The stacked support bound is at least one, got {s_K_bar}."
        raise ValueError(msg)


def iss_margin(p: LayerParams, s_K_bar: float) -> Any:
    """𝒜 = σ_q̂ · s_K_bar · ‖A‖∞."""
    sigma_hat, _ = gate_bounds(p, s_K_bar)
    return tape.scalar(sigma_hat * s_K_bar * tape.tap_norm(p.A.taps))


def diss_margin(p: LayerParams, s_bar: float, s_K_bar: float) -> Any:
    """𝒜_δ = σ_q̂ s ‖A‖∞ + ¼ s² ‖Â‖∞ ‖A‖∞ + ¼ s² ‖Ã‖∞ ‖B‖∞ with s = s_K_bar.

    Every slot uses the stacked bound because the filters act through
    [I, S, …, S^K]; `s_bar` is only validated.
    """
    _check_bounds(s_bar, s_K_bar)
    sigma_hat, _ = gate_bounds(p, s_K_bar)
    norm_A = tape.tap_norm(p.A.taps)
    norm_B = tape.tap_norm(p.B.taps)
    quarter = 0.25 * s_K_bar * s_K_bar
    return tape.scalar(
        sigma_hat * s_K_bar * norm_A
        + quarter * tape.tap_norm(p.A_hat.taps) * norm_A
        + quarter * tape.tap_norm(p.A_tilde.taps) * norm_B
    )


def input_gains(p: LayerParams, s_bar: float, s_K_bar: float) -> tuple[Any, Any, Any]:
    """The gains (ℬ, ℬ_δ, 𝒲) with s = s_K_bar.

    ℬ = σ_q̃ s ‖B‖∞ multiplies the input in the ISS bound.
    ℬ_δ = σ_q̃ s ‖B‖∞ + ¼ s² ‖B̂‖∞ ‖A‖∞ + ¼ s² ‖B̃‖∞ ‖B‖∞ multiplies the input
    difference in the δISS bound.
    𝒲 = σ_q̂ ‖A‖∞ + σ_q̃ ‖B‖∞ + ¼ s ‖A‖∞ (‖Â‖∞ + ‖B̂‖∞) + ¼ s ‖B‖∞ (‖Ã‖∞ + ‖B̃‖∞)
    multiplies the gap ‖S_K1 − S_K2‖∞ between two stacked supports.
    """
    _check_bounds(s_bar, s_K_bar)
    sigma_hat, sigma_tilde = gate_bounds(p, s_K_bar)
    norm_A = tape.tap_norm(p.A.taps)
    norm_B = tape.tap_norm(p.B.taps)
    norm_A_hat = tape.tap_norm(p.A_hat.taps)
    norm_B_hat = tape.tap_norm(p.B_hat.taps)
    norm_A_tilde = tape.tap_norm(p.A_tilde.taps)
    norm_B_tilde = tape.tap_norm(p.B_tilde.taps)
    quarter = 0.25 * s_K_bar * s_K_bar
    B_gain = sigma_tilde * s_K_bar * norm_B
    B_delta_gain = (
        sigma_tilde * s_K_bar * norm_B
        + quarter * norm_B_hat * norm_A
        + quarter * norm_B_tilde * norm_B
    )
    W_gain = (
        sigma_hat * norm_A
        + sigma_tilde * norm_B
        + 0.25 * s_K_bar * norm_A * (norm_A_hat + norm_B_hat)
        + 0.25 * s_K_bar * norm_B * (norm_A_tilde + norm_B_tilde)
    )
    return tape.scalar(B_gain), tape.scalar(B_delta_gain), tape.scalar(W_gain)


def diss_margins(net: NetworkParams, s_bar: float, s_K_bar: float) -> list[Any]:
    return [diss_margin(p, s_bar, s_K_bar) for p in net.layers]


@dataclass(frozen=True)
class RegularizerConfig:
    """Weights of the stability penalty.

    Attributes:
        rho_minus (float): Reward slope for margins below 1 + ε.
        rho_plus (float): Penalty slope for margins above 1 + ε.
        epsilon (float): Tolerated slack above one.
    """

    rho_minus: float = 0.01
    rho_plus: float = 1.0
    epsilon: float = 0.05

    def __post_init__(self) -> None:
        if not 0 < self.rho_minus < self.rho_plus:
            msg = (
                "The penalty slopes must satisfy 0 < rho_minus < rho_plus, got "
                f"{self.rho_minus} and {self.rho_plus}."
            )
            raise ValueError(msg)
        if self.epsilon < 0:
            msg = f"epsilon must be nonnegative, got {self.epsilon}."
            raise ValueError(msg)

    @classmethod
    def from_settings(cls) -> "RegularizerConfig":
        return cls(
            rho_minus=conf.get_rho_minus(),
            rho_plus=conf.get_rho_plus(),
            epsilon=conf.get_epsilon(),
        )


def stability_penalty(margins: Sequence[Any], cfg: RegularizerConfig) -> Any:
    """Π = Σ_i ρ₋ min(0, 𝒜_δⁱ − 1 − ε) + ρ₊ max(0, 𝒜_δⁱ − 1 − ε).

    The subgradient at 𝒜_δⁱ = 1 + ε is zero.
    """
    threshold = 1.0 + cfg.epsilon
    penalty: Any = 0.0
    for margin in margins:
        excess = tape.sub(margin, threshold)
        penalty = tape.add(
            penalty,
            tape.add(
                tape.scale(tape.negative_part(excess), cfg.rho_minus),
                tape.scale(tape.positive_part(excess), cfg.rho_plus),
            ),
        )
    return tape.scalar(penalty)


@dataclass(frozen=True)
class LayerCertificate:
    """Margins and gains of one layer.

    `iss_gain` is ((1−𝒜)⁻¹ℬ, (1−𝒜)⁻¹) and `diss_gain` is
    ((1−𝒜_δ)⁻¹ℬ_δ, (1−𝒜_δ)⁻¹𝒲); each is None when its margin is not below one.
    """

    index: int
    A_margin: float
    A_delta_margin: float
    B_gain: float
    B_delta_gain: float
    W_gain: float
    sigma_hat: float
    sigma_tilde: float
    iss_gain: tuple[float, float] | None = None
    diss_gain: tuple[float, float] | None = None

    @property
    def is_iss(self) -> bool:
        return self.A_margin <= 1.0

    @property
    def is_diss(self) -> bool:
        return self.A_delta_margin <= 1.0


@dataclass(frozen=True)
class StabilityCertificate:
    """Per-layer certificate records and the verdicts of the whole stack.

    Attributes:
        layers (list[LayerCertificate]): One record per layer.
        s_bar (float): The assumed bound on ‖S‖∞.
        s_K_bar (float): The assumed bound on ‖[I, S, …, S^K]‖∞.
        verdict_iss (bool): Every layer has 𝒜 ≤ 1.
        verdict_diss (bool): Every layer has 𝒜_δ ≤ 1.
        cascade (list[list[float]]): The lower-triangular gain matrix of the
            layer differences. Its diagonal holds the 𝒜_δⁱ and entry (i, j < i)
            is 𝒜_δʲ ∏_{h=j+1..i} ℬ_δʰ.
        cascade_input (list[float]): Gains from the network input difference,
            ∏_{h≤i} ℬ_δʰ.
        cascade_support (list[float]): Gains from the support gap,
            wᵢ = ℬ_δⁱ wᵢ₋₁ + 𝒲ⁱ.
        support_gap_bound (float): Worst-case ‖S_K1 − S_K2‖∞, 2(s_K_bar − 1).
        support_kind (str): The support the bounds were taken for.
    """

    layers: list[LayerCertificate]
    s_bar: float
    s_K_bar: float
    verdict_iss: bool
    verdict_diss: bool
    cascade: list[list[float]] = field(default_factory=list)
    cascade_input: list[float] = field(default_factory=list)
    cascade_support: list[float] = field(default_factory=list)
    support_gap_bound: float = 0.0
    support_kind: str = "normalized_laplacian"

    @property
    def failing_layers(self) -> list[int]:
        """Indexes of the layers without a δISS certificate."""
        return [layer.index for layer in self.layers if not layer.is_diss]

    @property
    def diss_margins(self) -> list[float]:
        return [layer.A_delta_margin for layer in self.layers]

    def to_dict(self) -> dict[str, Any]:
        document = asdict(self)
        for layer in document["layers"]:
            for key in ("iss_gain", "diss_gain"):
                if layer[key] is not None:
                    layer[key] = list(layer[key])
        document["failing_layers"] = self.failing_layers
        return document

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> "StabilityCertificate":
        layers = []
        for entry in document["layers"]:
            values = dict(entry)
            for key in ("iss_gain", "diss_gain"):
                if values.get(key) is not None:
                    values[key] = tuple(values[key])
            layers.append(LayerCertificate(**values))
        fields = {
            key: value
            for key, value in document.items()
            if key not in ("layers", "failing_layers")
        }
        return cls(layers=layers, **fields)

    def as_table(self) -> str:
        """A plain-text summary for terminals."""
        header = (
            f"{'layer':>5}  {'A':>10}  {'A_delta':>10}  {'B':>10}  "
            f"{'B_delta':>10}  {'W':>10}  {'ISS':>4}  {'dISS':>4}"
        )
        lines = [
            f"s_bar={self.s_bar:g}  s_K_bar={self.s_K_bar:g}  "
            f"support={self.support_kind}",
            header,
        ]
        for layer in self.layers:
            lines.append(
                f"{layer.index:>5}  {layer.A_margin:>10.4g}  "
                f"{layer.A_delta_margin:>10.4g}  {layer.B_gain:>10.4g}  "
                f"{layer.B_delta_gain:>10.4g}  {layer.W_gain:>10.4g}  "
                f"{'yes' if layer.is_iss else 'no':>4}  "
                f"{'yes' if layer.is_diss else 'no':>4}"
            )
        lines.append(
            f"verdict ISS: {self.verdict_iss}  verdict dISS: {self.verdict_diss}"
        )
        if self.failing_layers:
            lines.append(f"failing layers: {self.failing_layers}")
        return "\n".join(lines)


def _asymptotic_gain(margin: float, *gains: float) -> Any:
    if margin >= 1.0:
        return None
    return tuple(gain / (1.0 - margin) for gain in gains)


def cascade_gains(
    diss: Sequence[float], B_delta: Sequence[float], W: Sequence[float]
) -> tuple[list[list[float]], list[float], list[float]]:
    """Assemble the cascade matrix and vectors of a deep stack.

    Returns:
        tuple: (M_δ, M_Bδ, M_Wδ) as nested lists.
    """
    n = len(diss)
    matrix = np.zeros((n, n))
    for i in range(n):
        matrix[i, i] = diss[i]
        for j in range(i):
            matrix[i, j] = diss[j] * float(np.prod(B_delta[j + 1 : i + 1]))
    inputs = [float(np.prod(B_delta[: i + 1])) for i in range(n)]
    support = []
    running = 0.0
    for i in range(n):
        running = B_delta[i] * running + W[i]
        support.append(running)
    return matrix.tolist(), inputs, support


def certify(
    net: NetworkParams,
    s_bar: float | None = None,
    s_K_bar: float | None = None,
    *,
    n_agents: int | None = None,
) -> StabilityCertificate:
    """Certify every layer of `net` for supports bounded by the given norms.

    Args:
        net (NetworkParams): The network.
        s_bar (float | None): Bound on ‖S‖∞. Defaults to the bound of the
            network's support kind.
        s_K_bar (float | None): Bound on ‖[I, S, …, S^K]‖∞. Defaults to
            Σ_k s_bar^k.
        n_agents (int | None): Team size, needed to bound adjacency and
            Laplacian supports when `s_bar` is not given.

    Returns:
        StabilityCertificate: The certificate. Verdicts do not depend on the
            number of agents beyond the bounds.
    """
    if s_bar is None:
        s_bar = default_support_bound(net.support_kind, n_agents)
    if s_K_bar is None:
        s_K_bar = stacked_shift_norm_bound(s_bar, net.k_order)
    _check_bounds(s_bar, s_K_bar)
    records = []
    for index, p in enumerate(net.layers):
        sigma_hat, sigma_tilde = gate_bounds(p, s_K_bar)
        A_margin = float(iss_margin(p, s_K_bar))
        A_delta_margin = float(diss_margin(p, s_bar, s_K_bar))
        B_gain, B_delta_gain, W_gain = (
            float(gain) for gain in input_gains(p, s_bar, s_K_bar)
        )
        records.append(
            LayerCertificate(
                index=index,
                A_margin=A_margin,
                A_delta_margin=A_delta_margin,
                B_gain=B_gain,
                B_delta_gain=B_delta_gain,
                W_gain=W_gain,
                sigma_hat=float(sigma_hat),
                sigma_tilde=float(sigma_tilde),
                iss_gain=_asymptotic_gain(A_margin, B_gain, 1.0),
                diss_gain=_asymptotic_gain(A_delta_margin, B_delta_gain, W_gain),
            )
        )
    cascade, cascade_input, cascade_support = cascade_gains(
        [r.A_delta_margin for r in records],
        [r.B_delta_gain for r in records],
        [r.W_gain for r in records],
    )
    certificate = StabilityCertificate(
        layers=records,
        s_bar=float(s_bar),
        s_K_bar=float(s_K_bar),
        verdict_iss=all(r.is_iss for r in records),
        verdict_diss=all(r.is_diss for r in records),
        cascade=cascade,
        cascade_input=cascade_input,
        cascade_support=cascade_support,
        support_gap_bound=2.0 * (float(s_K_bar) - 1.0),
        support_kind=net.support_kind,
    )
    logger.info(
        "Certificate for %s layers: ISS %s, dISS %s, margins %s.",
        len(records),
        certificate.verdict_iss,
        certificate.verdict_diss,
        certificate.diss_margins,
    )
    return certificate


@dataclass(frozen=True)
class BoundCheck:
    """Outcome of a trajectory audit. Truthy when the bound holds everywhere.

    Attributes:
        holds (bool): Whether every step respects the bound.
        violation_index (int | None): The first step that does not.
    """

    holds: bool
    violation_index: int | None = None

    def __bool__(self) -> bool:
        return self.holds


def _require_contraction(margin: float) -> None:
    if margin >= 1.0:
        msg = f"no contraction certificate: the margin {margin} is not below one."
        raise NoContractionCertificateError(msg)


def check_iss_bound(
    norms: Sequence[float],
    margin: float,
    gain: float,
    input_norm: float,
    bias_norm: float,
    *,
    slack: float = DEFAULT_SLACK,
) -> BoundCheck:
    """Audit ‖x(t)‖∞ ≤ 𝒜ᵗ ‖x(0)‖∞ + (1−𝒜)⁻¹ (ℬ ‖u‖∞ + ‖b‖∞) along a trajectory.

    Args:
        norms (Sequence[float]): ‖x(t)‖∞ for t = 0, 1, ….
        margin (float): The layer's 𝒜.
        gain (float): The layer's ℬ.
        input_norm (float): A bound on ‖u(t)‖∞ over the trajectory.
        bias_norm (float): ‖b‖∞.
        slack (float): Absolute tolerance.

    Raises:
        NoContractionCertificateError: If 𝒜 ≥ 1.
    """
    _require_contraction(margin)
    if not norms:
        return BoundCheck(holds=True)
    offset = (gain * input_norm + bias_norm) / (1.0 - margin)
    initial = norms[0]
    for t, norm in enumerate(norms):
        if norm > margin**t * initial + offset + slack:
            return BoundCheck(holds=False, violation_index=t)
    return BoundCheck(holds=True)


def check_diss_bound(
    first: Sequence[np.ndarray],
    second: Sequence[np.ndarray],
    margin: float,
    input_gain: float,
    support_gain: float,
    input_gap: float = 0.0,
    support_gap: float = 0.0,
    *,
    slack: float = DEFAULT_SLACK,
) -> BoundCheck:
    """Audit two state trajectories of the same layer against
    ‖Δx(t)‖∞ ≤ 𝒜_δᵗ ‖Δx(0)‖∞ + (1−𝒜_δ)⁻¹ (ℬ_δ ‖Δu‖∞ + 𝒲 ‖ΔS_K‖∞).

    Args:
        first (Sequence[np.ndarray]): States x₁(t) for t = 0, 1, ….
        second (Sequence[np.ndarray]): States x₂(t), same length.
        margin (float): The layer's 𝒜_δ.
        input_gain (float): The layer's ℬ_δ.
        support_gain (float): The layer's 𝒲.
        input_gap (float): A bound on ‖u₁(t) − u₂(t)‖∞.
        support_gap (float): A bound on ‖S_K1(t) − S_K2(t)‖∞.
        slack (float): Absolute tolerance.

    Raises:
        NoContractionCertificateError: If 𝒜_δ ≥ 1.
        ValueError: If the trajectories have different lengths.
    """
    _require_contraction(margin)
    if len(first) != len(second):
        msg = "Paired trajectories must have the same length."
        raise ValueError(msg)
    if not first:
        return BoundCheck(holds=True)
    offset = (input_gain * input_gap + support_gain * support_gap) / (1.0 - margin)
    initial = signal_norm(np.asarray(first[0]) - np.asarray(second[0]))
    for t, (x1, x2) in enumerate(zip(first, second, strict=True)):
        gap = signal_norm(np.asarray(x1) - np.asarray(x2))
        if gap > margin**t * initial + offset + slack:
            return BoundCheck(holds=False, violation_index=t)
    return BoundCheck(holds=True)
