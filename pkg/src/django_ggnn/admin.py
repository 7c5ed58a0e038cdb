#
# admin.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Admin model registration for django_ggnn."""

from django.contrib import admin

from django_ggnn.models import GGNNController


@admin.register(GGNNController)
class GGNNControllerAdmin(admin.ModelAdmin):
    """Model admin for GGNNController."""

    list_display = ["name", "created", "modified"]
    readonly_fields = ["certificate", "report"]
