"""
Management command to train the DWAN denoiser on a simulated dataset
"""

import logging
from functools import partial
from pathlib import Path

from django.core.management.base import CommandError

from core.evaluation import validation_psnr
from core.exceptions import TrainingDivergedError
from core.management.base import NETWORK_KEYS, RunCommand
from core.network import DwanModel, build, save_params
from core.phantom import DatasetManifest
from core.trainer import train, write_loss_trace
from core.utils import file_digest, write_json

logger = logging.getLogger(__name__)


class Command(RunCommand):
    help = "Train DWAN on noisy pairs (lfn) or pseudo gold standard pairs (gold)"

    config_keys = (
        "seed", "data_dir", "out_dir", "mode", "loss", "batch_size", "epochs", "learning_rate",
        "shuffle", "checkpoint_every", "init_scheme", "init_seed", "train_seed",
    ) + NETWORK_KEYS

    def run(self, config, options):
        manifest = DatasetManifest.load(config.data_dir)
        pairs = manifest.load_pairs(config.mode)
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.echo_config(config, out_dir)

        spec = config.dwan_spec()
        train_config = config.train_config()
        params = build(spec, seed=config.seed_for("init"), scheme=config.init_scheme)

        validate = None
        if manifest.subjects("val"):
            validate = partial(validation_psnr, spec=spec, manifest=manifest)
        else:
            self.stdout.write(self.style.WARNING("⚠️  No validation subjects: keeping the final epoch"))

        self.stdout.write(self.style.SUCCESS(f"🚀 Training {config.method_name}"))
        self.stdout.write(f"📊 Pairs: {len(pairs)} ({config.mode}), loss={config.loss}, "
                          f"epochs={config.epochs}, batch={config.batch_size}")

        try:
            result = train(
                DwanModel(spec), params, pairs, train_config,
                checkpoint_dir=out_dir,
                validate=validate,
                progress=options.get("verbosity", 1) >= 1,
            )
        except TrainingDivergedError as exc:
            if exc.last_good_params is not None:
                path = save_params(exc.last_good_params, out_dir / "last_good.aslw")
                self.stdout.write(self.style.WARNING(f"💾 Kept last good parameters in {path}"))
            raise CommandError(f"❌ {exc}") from exc

        weights = save_params(result.params, out_dir / "weights.aslw")
        trace = write_loss_trace(result.loss_trace, out_dir / "loss_trace.csv")
        write_json(out_dir / "run.json", {
            "method": config.method_name,
            "mode": config.mode,
            "loss": config.loss,
            "epochs": config.epochs,
            "steps": result.steps,
            "best_epoch": result.best_epoch,
            "best_validation_psnr": result.best_score,
            "training_pairs": len(pairs),
            "checkpoints": [p.name for p in result.checkpoints],
            "weights_sha256": file_digest(weights),
        })

        first, last = result.loss_trace[0][1], result.loss_trace[-1][1]
        self.stdout.write(f"📉 Loss: epoch 1 {first:.4f} -> epoch {config.epochs} {last:.4f}")
        if result.best_score is not None:
            self.stdout.write(f"🏆 Best epoch {result.best_epoch}: validation PSNR {result.best_score:.2f} dB")
        self.stdout.write(f"📄 Loss trace: {trace}")
        self.stdout.write(self.style.SUCCESS(f"✅ Weights saved to {weights}"))
