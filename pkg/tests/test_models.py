#
# test_models.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

import pytest
from django.urls import reverse

from django_ggnn import conf
from django_ggnn.ggnn import init_network
from django_ggnn.models import (
    ControllerEmptyError,
    GGNNController,
    certificate_computed,
)
from django_ggnn.stability import StabilityCertificate

pytestmark = pytest.mark.django_db(transaction=True)


@pytest.mark.parametrize(
    "override_value,expected_result",
    [
        (None, 50),
        ("eight", 50),
        (True, 50),
        (12, 12),
    ],
)
def test_get_state_features(settings, override_value, expected_result) -> None:
    settings.GGNN_STATE_FEATURES = override_value
    assert conf.get_state_features() == expected_result


def test_get_state_features_missing_settings(settings) -> None:
    del settings.GGNN_STATE_FEATURES
    assert conf.get_state_features() == 50  # noqa: PLR2004


@pytest.mark.parametrize(
    "override_value,expected_result",
    [
        ("adjacency", "adjacency"),
        ("laplacian", "laplacian"),
        ("incidence", "normalized_laplacian"),
        (3, "normalized_laplacian"),
    ],
)
def test_get_support_kind(settings, override_value, expected_result) -> None:
    settings.GGNN_SUPPORT_KIND = override_value
    assert conf.get_support_kind() == expected_result


@pytest.mark.parametrize(
    "override_value,expected_result",
    [(2, 2.0), (0.5, 0.5), ("fast", 1e-3), (False, 1e-3)],
)
def test_get_learning_rate(settings, override_value, expected_result) -> None:
    settings.GGNN_LEARNING_RATE = override_value
    assert conf.get_learning_rate() == expected_result


def test_regularizer_defaults_missing_settings(settings) -> None:
    del settings.GGNN_RHO_PLUS
    del settings.GGNN_RHO_MINUS
    del settings.GGNN_EPSILON
    assert (conf.get_rho_plus(), conf.get_rho_minus(), conf.get_epsilon()) == (
        1.0,
        0.01,
        0.05,
    )


def test_controller_readiness(controller, empty_controller) -> None:
    assert controller.is_ready
    assert not empty_controller.is_ready
    assert empty_controller.network is None
    assert not controller.is_certified
    assert controller.stored_certificate() is None


def test_network_loads_the_stored_weights(controller, small_net) -> None:
    net = controller.network
    assert net.to_dict() == small_net.to_dict()
    assert controller.network is net


def test_refresh_drops_the_cached_network(controller) -> None:
    net = controller.network
    controller.refresh_from_db()
    assert controller.network is not net


def test_certify_stores_the_certificate(controller) -> None:
    result = controller.certify()
    controller.refresh_from_db()
    assert controller.certificate == result.to_dict()
    assert controller.stored_certificate() == result
    assert controller.is_certified == result.verdict_diss


def test_certify_with_adjacency_bounds(controller) -> None:
    result = controller.certify(s_bar=3.0, s_K_bar=13.0)
    assert result.s_bar == 3.0  # noqa: PLR2004
    assert result.s_K_bar == 13.0  # noqa: PLR2004


def test_certify_empty_controller(empty_controller) -> None:
    with pytest.raises(ControllerEmptyError):
        empty_controller.certify()


@pytest.mark.asyncio
async def test_acertify_sends_signal(controller) -> None:
    received = []

    def receiver(sender, **kwargs):
        received.append(kwargs | {"sender": sender})

    certificate_computed.connect(receiver, weak=False)
    try:
        result = await controller.acertify()
    finally:
        certificate_computed.disconnect(receiver)
    assert len(received) == 1
    kwargs = received[0]
    assert kwargs["sender"] is GGNNController
    assert kwargs["instance"] is controller
    assert isinstance(kwargs["certificate"], StabilityCertificate)
    assert kwargs["certificate"] == result


@pytest.mark.asyncio
async def test_aupdate_weights(empty_controller, rng) -> None:
    net = init_network(rng, state_features=3, filter_taps=1, hidden_width=4)
    modified = empty_controller.modified
    await empty_controller.aupdate_weights(net, report=[{"epoch": 1}])
    await empty_controller.arefresh_from_db()
    assert empty_controller.is_ready
    assert empty_controller.report == [{"epoch": 1}]
    assert empty_controller.network.to_dict() == net.to_dict()
    assert empty_controller.modified > modified


def test_update_weights_drops_the_certificate(controller, rng) -> None:
    controller.certify()
    controller.report = [{"epoch": 3}]
    controller.save()
    old = controller.network
    net = init_network(rng, state_features=2, filter_taps=0, hidden_width=3)
    controller.update_weights(net)
    assert controller.network is not old
    assert controller.network.to_dict() == net.to_dict()
    controller.refresh_from_db()
    assert controller.certificate is None
    assert not controller.is_certified
    assert controller.report == [{"epoch": 3}]


def test_admin_lists_controllers(admin_client, controller) -> None:
    response = admin_client.get(reverse("admin:django_ggnn_ggnncontroller_changelist"))
    assert response.status_code == 200  # noqa: PLR2004
    assert controller.name in response.content.decode()
