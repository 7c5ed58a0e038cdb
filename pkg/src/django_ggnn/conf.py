#
# conf.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Settings lookups.

Every value can be overridden from the Django settings of the host project. A
missing setting, or one of the wrong type, falls back to the documented default.
"""

from typing import Any

from django.conf import settings

SUPPORT_KINDS = ("adjacency", "laplacian", "normalized_laplacian")


def _get_typed_setting(
    name: str, expected: type | tuple[type, ...], default: Any
) -> Any:
    """Return `settings.<name>` if present and of the expected type, else `default`.

    Booleans are never accepted where a number is expected.
    """
    if not hasattr(settings, name):
        return default
    value = getattr(settings, name)
    if isinstance(value, bool) and bool not in (
        expected if isinstance(expected, tuple) else (expected,)
    ):
        return default
    if not isinstance(value, expected):
        return default
    return value


def get_support_kind() -> str:
    """Support matrix used by new networks. Defaults to the normalized Laplacian,
    whose spectrum stays within [0, 2] on any topology."""
    kind = _get_typed_setting("GGNN_SUPPORT_KIND", str, "normalized_laplacian")
    if kind not in SUPPORT_KINDS:
        return "normalized_laplacian"
    return kind


def get_state_features() -> int:
    """Width F of the recurrent state."""
    return _get_typed_setting("GGNN_STATE_FEATURES", int, 50)


def get_filter_taps() -> int:
    """Filter order K."""
    return _get_typed_setting("GGNN_FILTER_TAPS", int, 2)


def get_layers() -> int:
    """Number M of stacked recurrent layers."""
    return _get_typed_setting("GGNN_LAYERS", int, 1)


def get_hidden_width() -> int:
    """Width of the encoder and readout head affine maps."""
    return _get_typed_setting("GGNN_HIDDEN_WIDTH", int, 128)


def get_control_saturation() -> float:
    """Componentwise acceleration limit in m/s²."""
    return float(_get_typed_setting("GGNN_CONTROL_SATURATION", (int, float), 5.0))


def get_sampling_time() -> float:
    """Sampling time T in seconds; the action and communication clocks coincide."""
    return float(_get_typed_setting("GGNN_SAMPLING_TIME", (int, float), 0.01))


def get_rho_plus() -> float:
    return float(_get_typed_setting("GGNN_RHO_PLUS", (int, float), 1.0))


def get_rho_minus() -> float:
    return float(_get_typed_setting("GGNN_RHO_MINUS", (int, float), 0.01))


def get_epsilon() -> float:
    """Slack above one tolerated by the stability penalty."""
    return float(_get_typed_setting("GGNN_EPSILON", (int, float), 0.05))


def get_learning_rate() -> float:
    return float(_get_typed_setting("GGNN_LEARNING_RATE", (int, float), 1e-3))


def get_ca_squared_threshold() -> bool:
    """If True, the collision-avoidance gradient compares ‖r‖² with R_CA²
    instead of with R_CA."""
    return _get_typed_setting("GGNN_CA_SQUARED_THRESHOLD", bool, False)
