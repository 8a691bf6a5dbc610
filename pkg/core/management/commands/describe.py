"""
Management command to print the DWAN structural audit
"""

import logging

from django.core.management.base import CommandError

from core.management.base import NETWORK_KEYS, RunCommand
from core.network import audit, build, describe, empirical_receptive_field, load_params

logger = logging.getLogger(__name__)


class Command(RunCommand):
    help = "Print the DWAN layer table, parameter counts and dilations"

    config_keys = ("seed", "weights", "init_seed") + NETWORK_KEYS

    def add_command_arguments(self, parser):
        parser.add_argument(
            "--receptive-field",
            action="store_true",
            help="Also measure the receptive field with an impulse-gradient measurement",
        )

    def run(self, config, options):
        spec = config.dwan_spec()
        params = load_params(config.weights) if config.weights else None

        self.stdout.write(self.style.SUCCESS("🏗️  DWAN architecture"))
        if config.weights:
            self.stdout.write(f"📦 Auditing {config.weights}")
        self.stdout.write(describe(spec, params))

        if options["receptive_field"]:
            measured_params = params if params is not None else build(spec, seed=config.seed_for("init"), scheme="he")
            for pathway in ("local", "global", "full"):
                width = empirical_receptive_field(measured_params, spec, pathway)
                self.stdout.write(f"🔬 Empirical receptive field ({pathway}): {width} px")

        if not audit(spec, params).ok:
            raise CommandError("❌ Parameters do not match the configured architecture")
        self.stdout.write(self.style.SUCCESS("✅ Audit passed"))
