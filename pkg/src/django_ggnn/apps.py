#
# apps.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

from django.apps import AppConfig
from django.utils.translation import gettext_lazy as _


class GGNNConfig(AppConfig):
    """
    App config for Django.
    """

    default_auto_field = "django.db.models.BigAutoField"
    name = "django_ggnn"
    verbose_name = _("Django GGNN")
