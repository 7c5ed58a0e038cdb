#
# models.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Models"""

from typing import Any, ClassVar

from asgiref.sync import async_to_sync
from django import dispatch
from django.db import models
from django.utils.functional import cached_property
from django.utils.translation import gettext_lazy as _

from django_ggnn.exceptions import GGNNError
from django_ggnn.ggnn import NetworkParams
from django_ggnn.stability import StabilityCertificate, certify


class ControllerEmptyError(GGNNError):
    """Raised when inspecting or certifying a controller that has no weights."""

    pass


certificate_computed = dispatch.Signal()


class GGNNController(models.Model):
    """Stores a trained gated graph neural network controller.

    Attributes:
        name (str): Unique name of the controller.
        created (datetime.datetime): Date and time when the controller was created.
        modified (datetime.datetime): Date and time when the record was last modified.
        weights (JSON): The parameter document of the network.
        certificate (JSON): The stability certificate of the stored weights, if
            computed.
        report (JSON): Per-epoch training records, if the controller was trained
            by this app.
    """

    cached_properties: ClassVar[list[str]] = ["network"]

    name = models.CharField(
        max_length=255, unique=True, help_text=_("Unique name of the controller.")
    )
    created = models.DateTimeField(
        auto_now_add=True, help_text=_("When the controller was created.")
    )
    modified = models.DateTimeField(
        auto_now=True, help_text=_("Last modification of the record.")
    )
    weights = models.JSONField(
        null=True, blank=True, help_text=_("The network parameters as JSON.")
    )
    certificate = models.JSONField(
        null=True,
        blank=True,
        help_text=_("Stability certificate of the stored weights."),
    )
    report = models.JSONField(
        null=True, blank=True, help_text=_("Per-epoch training report.")
    )

    def __str__(self):  # no cov
        return self.name

    def refresh_from_db(self, *args: Any, **kwargs: Any):
        """Remove the value of the cached properties before refreshing the data."""
        super().refresh_from_db(*args, **kwargs)
        for prop in self.cached_properties:
            try:
                del self.__dict__[prop]
            except KeyError:
                pass

    @property
    def is_ready(self) -> bool:
        """Flag to indicate if the controller holds weights."""
        if self.weights:
            return True
        return False

    @property
    def is_certified(self) -> bool:
        """Whether the stored certificate proves incremental stability."""
        if not self.certificate:
            return False
        return bool(self.certificate.get("verdict_diss", False))

    @cached_property
    def network(self) -> NetworkParams | None:
        """The stored weights loaded into a network, or None if there are none."""
        if not self.is_ready:
            return None
        return NetworkParams.from_dict(self.weights)

    def stored_certificate(self) -> StabilityCertificate | None:
        if not self.certificate:
            return None
        return StabilityCertificate.from_dict(self.certificate)

    async def acertify(
        self,
        *,
        s_bar: float | None = None,
        s_K_bar: float | None = None,
        n_agents: int | None = None,
    ) -> StabilityCertificate:
        """Certify the stored weights, save the certificate and send
        `certificate_computed`.

        Args:
            s_bar (float | None): Bound on ‖S‖∞; defaults to the bound of the
                network's support kind.
            s_K_bar (float | None): Bound on the stacked support norm.
            n_agents (int | None): Team size for adjacency and Laplacian bounds.

        Raises:
            ControllerEmptyError: If there are no weights.
        """
        net = self.network
        if net is None:
            msg = f"Controller {self.name} has no weights to certify."
            raise ControllerEmptyError(msg)
        result = certify(net, s_bar, s_K_bar, n_agents=n_agents)
        self.certificate = result.to_dict()
        await self.asave()
        await certificate_computed.asend(  # type: ignore
            sender=self.__class__,
            instance=self,
            certificate=result,
        )
        return result

    def certify(
        self,
        *,
        s_bar: float | None = None,
        s_K_bar: float | None = None,
        n_agents: int | None = None,
    ) -> StabilityCertificate:
        """Sync wrapper for `acertify`."""
        return async_to_sync(self.acertify)(
            s_bar=s_bar, s_K_bar=s_K_bar, n_agents=n_agents
        )

    async def aupdate_weights(
        self,
        net: NetworkParams,
        *,
        report: list[dict[str, Any]] | None = None,
    ) -> None:
        """Replace the stored weights. The certificate of the old weights is
        dropped; the report is replaced only when one is given.

        Args:
            net (NetworkParams): The new network.
            report (list[dict] | None): Training records of the new network.
        """
        self.weights = net.to_dict()
        self.certificate = None
        if report is not None:
            self.report = report
        await self.asave()
        try:
            del self.__dict__["network"]
        except KeyError:
            pass

    def update_weights(
        self,
        net: NetworkParams,
        *,
        report: list[dict[str, Any]] | None = None,
    ) -> None:
        """Sync wrapper for `aupdate_weights`."""
        async_to_sync(self.aupdate_weights)(net, report=report)
