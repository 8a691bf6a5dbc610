"""
Management command to simulate a synthetic ASL dataset
"""

import logging
import shutil
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from core.management.base import RunCommand
from core.phantom import build_dataset
from core.utils import worker_count, write_json

logger = logging.getLogger(__name__)

# Files a previous simulate run leaves behind; --force clears only these.
DATASET_ARTIFACTS = ("subjects", "manifest.tsv", "config.json", "run_metadata.json")


class Command(RunCommand):
    help = "Simulate phantom subjects, segment means and pseudo gold standards"

    config_keys = (
        "seed", "data_dir", "subjects", "split", "height", "width", "sigma", "outlier_rate",
        "outlier_scale", "correlation_length", "fwhm_px", "geometry_seed", "noise_seed",
    )

    def add_command_arguments(self, parser):
        parser.add_argument(
            "--force",
            action="store_true",
            help="Overwrite an existing dataset in the output directory",
        )

    def _prepare(self, root: Path, force: bool) -> None:
        if root.exists() and any(root.iterdir()):
            if not force:
                raise CommandError(f"❌ {root} is not empty; use --force to overwrite")
            self.stdout.write(self.style.WARNING(f"⚠️  Overwriting dataset in {root}"))
            for name in DATASET_ARTIFACTS:
                target = root / name
                if target.is_dir():
                    shutil.rmtree(target)
                elif target.exists():
                    target.unlink()
        root.mkdir(parents=True, exist_ok=True)

    def run(self, config, options):
        root = Path(config.data_dir)
        self._prepare(root, options["force"])

        noise = config.noise_model()
        self.stdout.write(self.style.SUCCESS("🧠 ASL Phantom Simulation"))
        self.stdout.write(f"📊 Subjects: {config.subjects} (split {','.join(map(str, config.split))})")
        self.stdout.write(f"📐 Slice: {config.height}x{config.width}, sigma={config.sigma}, "
                          f"outliers={config.outlier_rate}")

        manifest = build_dataset(
            n_subjects=config.subjects,
            noise=noise,
            shape=config.shape,
            split=config.split,
            out_dir=root,
            seed=config.seed_for("geometry"),
            fwhm_px=config.fwhm_px,
            n_jobs=worker_count(),
            progress=options.get("verbosity", 1) >= 1,
        )

        self.echo_config(config, root)
        write_json(root / "run_metadata.json", {
            "version": settings.ASLDN_VERSION,
            "command": "simulate",
            "subjects": len(manifest.entries),
            "roles": {role: len(manifest.subjects(role)) for role in ("train", "val", "test")},
            "training_pairs": len(manifest.training_pairs()),
            "geometry_seed": config.seed_for("geometry"),
            "noise_seed": config.seed_for("noise"),
        })

        self.stdout.write(f"📄 Manifest: {root / manifest.MANIFEST}")
        self.stdout.write(
            self.style.SUCCESS(f"✅ Simulated {len(manifest.entries)} subjects, "
                               f"{len(manifest.training_pairs())} training pairs")
        )
