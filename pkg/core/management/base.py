"""
Shared plumbing for the pipeline management commands: RunConfig flags,
config resolution (file, then flags) and the config echo.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Sequence

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from core.exceptions import DenoisingError
from core.run_config import RunConfig
from core.utils import write_json

logger = logging.getLogger(__name__)

KEY_HELP = {
    "seed": "Master seed; every unset subsystem seed derives from it",
    "data_dir": "Dataset directory (manifest.tsv + subjects/)",
    "out_dir": "Output directory for weights, traces and reports",
    "weights": "ASLW weight file",
    "subjects": "Number of simulated subjects",
    "split": "Subject counts per role as train,val,test",
    "height": "Slice height in pixels",
    "width": "Slice width in pixels",
    "sigma": "Per-frame Gaussian noise std (0 = noise-free)",
    "outlier_rate": "Fraction of outlier frames per subject",
    "outlier_scale": "Noise multiplier for outlier frames",
    "correlation_length": "Spatial noise correlation in pixels (0 = white)",
    "fwhm_px": "Pseudo gold standard smoothing FWHM in pixels",
    "geometry_seed": "Explicit phantom geometry seed",
    "noise_seed": "Explicit noise seed",
    "init_seed": "Explicit weight-initialization seed",
    "train_seed": "Explicit shuffle seed",
    "base_channels": "DWAN feature channels",
    "expansion_channels": "DWAN wide-activation channels",
    "blocks_per_pathway": "Residual blocks per pathway",
    "global_dilations": "Dilations of the global pathway, comma separated",
    "intensity_scale": "Factor applied to CBF values entering the network (undone on the way out)",
    "init_scheme": "Weight initialization: residual (starts at the identity map) or he",
    "mode": "lfn (noisy references) or gold (pseudo gold standard references)",
    "loss": "l1 or l2",
    "batch_size": "Mini-batch size",
    "epochs": "Training epochs",
    "learning_rate": "ADAM learning rate",
    "shuffle": "Shuffle pairs every epoch (true/false)",
    "checkpoint_every": "Checkpoint cadence in epochs (0 disables)",
    "correlation_threshold": "Correlation maps keep r above this value",
    "method": "Method name written to the reports",
}

NETWORK_KEYS = (
    "base_channels", "expansion_channels", "blocks_per_pathway", "global_dilations", "intensity_scale",
)


class RunCommand(BaseCommand):
    """
    Base for commands driven by a RunConfig. Subclasses list the keys they
    expose as flags in ``config_keys`` and implement ``run``.
    """

    config_keys: Sequence[str] = ()
    # commands sharing an output directory need distinct echo files
    config_filename = "config.json"

    def add_arguments(self, parser):
        parser.add_argument(
            "--config",
            type=str,
            default=None,
            help="key = value config file; flags override its values",
        )
        for key in self.config_keys:
            parser.add_argument(
                f"--{key.replace('_', '-')}",
                dest=key,
                type=str,
                default=None,
                help=KEY_HELP.get(key, key),
            )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def resolve_config(self, options: Dict[str, Any]) -> RunConfig:
        overrides = {key: options.get(key) for key in self.config_keys}
        return RunConfig.load(options.get("config"), overrides)

    def echo_config(self, config: RunConfig, directory: Path, **extra) -> Path:
        payload = {
            "command": self.command_name,
            "version": settings.ASLDN_VERSION,
            "config": config.to_dict(),
        }
        payload.update(extra)
        return write_json(Path(directory) / self.config_filename, payload)

    @property
    def command_name(self) -> str:
        return self.__module__.rsplit(".", 1)[-1]

    def handle(self, *args, **options):
        try:
            config = self.resolve_config(options)
            return self.run(config, options)
        except DenoisingError as exc:
            logger.error(f"{self.command_name} failed: {exc}")
            raise CommandError(f"❌ {exc}") from exc

    def run(self, config: RunConfig, options: Dict[str, Any]):
        raise NotImplementedError
