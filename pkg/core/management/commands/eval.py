"""
Management command to evaluate a denoiser on the test split
"""

import logging
from pathlib import Path

from core.evaluation import evaluate_split, write_evaluation
from core.management.base import NETWORK_KEYS, RunCommand
from core.network import audit, identity_params, load_params
from core.phantom import DatasetManifest
from core.utils import file_digest, worker_count

logger = logging.getLogger(__name__)


class Command(RunCommand):
    help = "Score test-split outputs against the pseudo gold standard and the clean image"

    config_keys = (
        "seed", "data_dir", "out_dir", "weights", "method", "mode", "loss", "correlation_threshold",
    ) + NETWORK_KEYS
    config_filename = "eval_config.json"

    def add_command_arguments(self, parser):
        parser.add_argument(
            "--identity",
            action="store_true",
            help="Evaluate the identity network (output = input) instead of a weight file",
        )

    def run(self, config, options):
        spec = config.dwan_spec()
        out_dir = Path(config.out_dir)

        if options["identity"]:
            params = identity_params(spec)
            method = config.method or "identity"
            source = "identity"
        else:
            weights = Path(config.weights) if config.weights else out_dir / "weights.aslw"
            params = load_params(weights)
            method = config.method_name
            source = str(weights)
            self.stdout.write(f"📦 Weights: {weights} (sha256 {file_digest(weights)[:12]})")
        audit(spec, params).verify()

        manifest = DatasetManifest.load(config.data_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.echo_config(config, out_dir, weights=source)

        self.stdout.write(self.style.SUCCESS(f"🔍 Evaluating {method}"))
        result = evaluate_split(
            params, spec, manifest, method,
            n_jobs=worker_count(),
            correlation_threshold=config.correlation_threshold,
        )
        written = write_evaluation(result, out_dir, config.correlation_threshold)

        summary = result.report_vs_clean.aggregate()
        self.stdout.write("\n📊 Against the clean image:")
        for row in summary.itertuples(index=False):
            self.stdout.write(
                f"  {row.method:<24} PSNR {row.psnr_db_mean:6.2f} ± {row.psnr_db_std:5.2f} dB   "
                f"SSIM {row.ssim_mean:.3f} ± {row.ssim_std:.3f}"
            )
        self.stdout.write(
            self.style.SUCCESS(f"✅ Wrote {len(written)} files for {len(result.subjects)} test subjects to {out_dir}")
        )
