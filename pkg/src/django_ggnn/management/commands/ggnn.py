#
# ggnn.py
#
# Copyright (c) 2024 Daniel Andrlik
# All rights reserved.
#
# SPDX-License-Identifier: BSD-3-Clause
#

"""Command line entry point: `manage.py ggnn <subcommand>`."""

import argparse
from typing import Any

from django.core.management.base import BaseCommand, CommandError, CommandParser

from django_ggnn.conf import SUPPORT_KINDS
from django_ggnn.exceptions import (
    ConfigError,
    GGNNError,
    TrainingDivergedError,
    WeightsFormatError,
)
from django_ggnn.models import GGNNController
from django_ggnn.runs import (
    POLICIES,
    RunConfig,
    cmd_certify,
    cmd_eval,
    cmd_gen_data,
    cmd_simulate,
    cmd_train,
)

SUBCOMMANDS = {
    "gen-data": "Record expert rollouts over sampled scenarios.",
    "train": "Train a controller by imitation of the expert.",
    "certify": "Certify the stability of a weights file.",
    "eval": "Evaluate a policy over a grid of team sizes, radii and delays.",
    "simulate": "Run a single rollout and write it as CSV.",
}


def _add_scenario_arguments(parser: CommandParser) -> None:
    parser.add_argument("--comm-radius", dest="comm_radius", type=float)
    parser.add_argument("--sensing-radius", dest="sensing_radius", type=float)
    parser.add_argument("--horizon", type=float)
    parser.add_argument("--dt", type=float)
    parser.add_argument("--saturation", type=float)
    parser.add_argument("--leader-gain", dest="leader_gain", type=float)
    parser.add_argument("--max-degree", dest="max_degree", type=int)
    parser.add_argument(
        "--squared-threshold",
        dest="squared_threshold",
        action=argparse.BooleanOptionalAction,
    )


def _add_bound_arguments(parser: CommandParser) -> None:
    parser.add_argument("--s-bar", dest="s_bar", type=float)
    parser.add_argument("--s-k-bar", dest="s_K_bar", type=float)
    parser.add_argument("--n-agents", dest="n_agents", type=int)
    parser.add_argument(
        "--team-sizes", dest="team_sizes", type=int, nargs="+", metavar="N"
    )


class Command(BaseCommand):
    help = "Generate data for, train, certify and evaluate GGNN flocking controllers."

    def add_arguments(self, parser: CommandParser) -> None:
        subparsers = parser.add_subparsers(
            dest="subcommand", required=True, metavar="subcommand"
        )
        for name, text in SUBCOMMANDS.items():
            sub = subparsers.add_parser(name, help=text)
            sub.add_argument("--seed", type=int)
            sub.add_argument("--out", help="Output directory.")
            sub.add_argument("--config", help="JSON file of run parameters.")
            getattr(self, f"_add_{name.replace('-', '_')}_arguments")(sub)

    def _add_gen_data_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("--count", type=int)
        parser.add_argument(
            "--team-sizes", dest="team_sizes", type=int, nargs="+", metavar="N"
        )
        _add_scenario_arguments(parser)

    def _add_train_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("--data", help="Dataset directory.")
        parser.add_argument("--register", metavar="NAME")
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--batch-size", dest="batch_size", type=int)
        parser.add_argument("--dagger-interval", dest="dagger_interval", type=int)
        parser.add_argument("--dagger-rollouts", dest="dagger_rollouts", type=int)
        parser.add_argument("--bptt-window", dest="bptt_window", type=int)
        parser.add_argument("--stable", action=argparse.BooleanOptionalAction)
        parser.add_argument("--learning-rate", dest="learning_rate", type=float)
        parser.add_argument("--rho-plus", dest="rho_plus", type=float)
        parser.add_argument("--rho-minus", dest="rho_minus", type=float)
        parser.add_argument("--epsilon", type=float)
        parser.add_argument(
            "--support-kind", dest="support_kind", choices=SUPPORT_KINDS
        )
        parser.add_argument("--state-features", dest="state_features", type=int)
        parser.add_argument("--filter-taps", dest="filter_taps", type=int)
        parser.add_argument("--layers", type=int)
        parser.add_argument("--hidden-width", dest="hidden_width", type=int)
        _add_bound_arguments(parser)
        _add_scenario_arguments(parser)

    def _add_certify_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("--weights", help="Weights file to certify.")
        _add_bound_arguments(parser)

    def _add_eval_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("--weights", help="Weights file of the network policy.")
        parser.add_argument("--policy", choices=POLICIES)
        parser.add_argument(
            "--eval-team-sizes", dest="eval_team_sizes", type=int, nargs="+"
        )
        parser.add_argument("--eval-radii", dest="eval_radii", type=float, nargs="+")
        parser.add_argument("--eval-delays", dest="eval_delays", type=int, nargs="+")
        parser.add_argument("--eval-rollouts", dest="eval_rollouts", type=int)
        _add_scenario_arguments(parser)

    def _add_simulate_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("--weights", help="Weights file of the network policy.")
        parser.add_argument("--policy", choices=POLICIES)
        parser.add_argument("--agents", type=int)
        parser.add_argument("--comm-delay", dest="comm_delay", type=int)
        _add_scenario_arguments(parser)

    def handle(self, *args: Any, **options: Any) -> None:
        subcommand = options["subcommand"]
        overrides = {
            key: value
            for key, value in options.items()
            if key in RunConfig.field_names()
        }
        try:
            config = RunConfig.resolve(options.get("config"), overrides)
        except ConfigError as err:
            raise CommandError(str(err), returncode=2) from err
        try:
            getattr(self, f"handle_{subcommand.replace('-', '_')}")(config)
        except (ConfigError, WeightsFormatError) as err:
            raise CommandError(str(err), returncode=2) from err
        except TrainingDivergedError as err:
            msg = f"{err} Last good weights were written to {config.out}."
            raise CommandError(msg, returncode=3) from err
        except GGNNError as err:
            raise CommandError(str(err), returncode=1) from err

    def handle_gen_data(self, config: RunConfig) -> None:
        manifest = cmd_gen_data(config)
        splits = manifest["splits"]
        self.stdout.write(
            self.style.SUCCESS(
                f"Wrote {manifest['count']} trajectories to {config.out} "
                f"({splits['train']} train, {splits['validation']} validation, "
                f"{splits['test']} test)."
            )
        )

    def handle_train(self, config: RunConfig) -> None:
        result = cmd_train(config)
        self.stdout.write(result.certificate.as_table())
        if config.register:
            controller, created = GGNNController.objects.update_or_create(
                name=config.register,
                defaults={
                    "weights": result.network.to_dict(),
                    "certificate": result.certificate.to_dict(),
                    "report": result.report,
                },
            )
            verb = "Registered" if created else "Updated"
            self.stdout.write(f"{verb} controller {controller.name}.")
        self.stdout.write(
            self.style.SUCCESS(
                f"Trained for {len(result.report)} epochs; outputs in {config.out}."
            )
        )

    def handle_certify(self, config: RunConfig) -> None:
        certificate = cmd_certify(config)
        self.stdout.write(certificate.as_table())
        if not certificate.verdict_diss:
            layers = ", ".join(str(index) for index in certificate.failing_layers)
            msg = f"No incremental stability certificate; failing layers: {layers}."
            raise CommandError(msg, returncode=1)
        self.stdout.write(self.style.SUCCESS("Certified incrementally stable."))

    def handle_eval(self, config: RunConfig) -> None:
        rows = cmd_eval(config)
        for row in rows:
            self.stdout.write(
                f"N={row['n_agents']} R={row['comm_radius']} "
                f"delay={row['comm_delay']}: mean cost {row['cost_mean']}, "
                f"failure rate {row['failure_rate']}"
            )
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(rows)} evaluation cells."))

    def handle_simulate(self, config: RunConfig) -> None:
        trajectory = cmd_simulate(config)
        self.stdout.write(
            self.style.SUCCESS(
                f"Simulated {trajectory.n_steps} steps: average cost "
                f"{trajectory.average_cost:.4g}, failure {trajectory.failure_reason}."
            )
        )
