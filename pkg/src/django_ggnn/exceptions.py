#
# exceptions.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Exceptions raised by django_ggnn."""

from typing import Any


class GGNNError(Exception):
    """Base class for every error raised by this app."""

    pass


class ConfigError(GGNNError):
    """Raised when a run configuration contains unknown or invalid keys."""

    pass


class WeightsFormatError(GGNNError):
    """Raised when a serialized parameter document cannot be parsed."""

    pass


class DimensionMismatchError(GGNNError, ValueError):
    """Raised when matrix or signal shapes do not agree."""

    pass


class AgentOverlapError(GGNNError):
    """Raised when two distinct agents occupy the same position while building
    a communication graph."""

    pass


class CoincidentAgentsError(GGNNError):
    """Raised when a collision-avoidance term is evaluated on a zero offset."""

    pass


class InsufficientHistoryError(GGNNError):
    """Raised when a delayed filter is applied before its history is warm."""

    pass


class InputOutOfBoundsError(GGNNError):
    """Raised when a layer input or state leaves the unit ball."""

    pass


class StateCountMismatchError(GGNNError):
    """Raised when the number of layer states does not match the network depth."""

    pass


class NoContractionCertificateError(GGNNError):
    """Raised when a bound audit is requested for a margin that is not below one."""

    pass


class NonFiniteValueError(GGNNError):
    """Raised when a recorded operation produces a non-finite value.

    Attributes:
        operation_index (int): Position of the offending operation on the tape.
        operation (str): Name of the offending primitive.
    """

    def __init__(self, msg: str, *, operation_index: int, operation: str) -> None:
        super().__init__(msg)
        self.operation_index = operation_index
        self.operation = operation


class DegenerateScenarioError(GGNNError):
    """Raised when a metric is undefined for the given scenario."""

    pass


class ScenarioSamplingError(GGNNError):
    """Raised when the scenario sampler exhausts its rejection budget."""

    pass


class TrainingDivergedError(GGNNError):
    """Raised when the training loss stops being finite.

    Attributes:
        checkpoint: The last parameters that produced a finite loss.
        report (list[dict]): The epoch records collected before the failure.
    """

    def __init__(
        self, msg: str, *, checkpoint: Any, report: list[dict[str, Any]]
    ) -> None:
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.report = report
