#
# optim.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Adaptive moment estimation over named parameter arrays."""

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from django_ggnn import conf
from django_ggnn.exceptions import DimensionMismatchError


@dataclass
class OptimizerState:
    """Moments and hyperparameters of an Adam run.

    Attributes:
        learning_rate (float): Step size.
        beta1 (float): Decay of the first moment.
        beta2 (float): Decay of the second moment.
        eps (float): Offset added to the root of the second moment.
        step (int): Number of updates applied so far.
        first (dict[str, np.ndarray]): First moments, keyed like the parameters.
        second (dict[str, np.ndarray]): Second moments, keyed like the parameters.
    """

    learning_rate: float = field(default_factory=conf.get_learning_rate)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> dict[str, np.ndarray]:
    """Apply one bias-corrected Adam update.

    The state is updated in place and the new parameters are returned; the input
    arrays are left untouched.

    Raises:
        DimensionMismatchError: If the gradients do not match the parameters.
    """
    if set(params) != set(grads):
        mismatch = sorted(set(params) ^ set(grads))
        msg = f"Gradients do not match the parameters: {mismatch}"
        raise DimensionMismatchError(msg)
    for name, value in params.items():
        if np.shape(grads[name]) != np.shape(value):
            msg = (
                f"Gradient of {name} has shape {np.shape(grads[name])}, "
                f"expected {np.shape(value)}."
            )
            raise DimensionMismatchError(msg)
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    updated = {}
    for name, value in params.items():
        grad = np.asarray(grads[name], dtype=float)
        first = state.first.get(name, np.zeros_like(grad))
        second = state.second.get(name, np.zeros_like(grad))
        first = state.beta1 * first + (1.0 - state.beta1) * grad
        second = state.beta2 * second + (1.0 - state.beta2) * grad * grad
        state.first[name] = first
        state.second[name] = second
        m_hat = first / correction1
        v_hat = second / correction2
        step = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        updated[name] = value - step
    return updated
