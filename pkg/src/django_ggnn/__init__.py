#
# __init__.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""A reusable Django app for training, certifying and storing gated graph neural
network controllers."""
