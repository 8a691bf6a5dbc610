"""
Run configuration: a flat ``key = value`` text file plus command-line flags.

Parsing goes through python-decouple's ``RepositoryEnv`` (``#`` comments,
blank lines and surrounding quotes handled there). Every key is typed; an
unknown key is a hard error. Flags override file values.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple, Union

from decouple import Csv, RepositoryEnv, strtobool

from .exceptions import ConfigError, DenoisingError
from .network import INIT_SCHEMES, DwanSpec
from .phantom import NoiseModel
from .trainer import TrainConfig
from .utils import derive_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MODES = ("lfn", "gold")
LOSS_KINDS = ("l1", "l2")
SEED_LABELS = ("geometry", "noise", "init", "train")


def _int_tuple(value: str) -> Tuple[int, ...]:
    return tuple(Csv(cast=int)(value))


def _optional_int(value: str) -> Optional[int]:
    return None if value.strip() in ("", "none", "None") else int(value)


def _bool(value: Any) -> bool:
    return value if isinstance(value, bool) else bool(strtobool(str(value)))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_dir: str = "dataset"
    out_dir: str = "runs"
    weights: str = ""
    # dataset / phantom
    subjects: int = 35
    split: Tuple[int, ...] = (20, 5, 10)
    height: int = 64
    width: int = 64
    sigma: float = 120.0
    outlier_rate: float = 0.0
    outlier_scale: float = 10.0
    correlation_length: float = 0.0
    fwhm_px: float = 1.5
    geometry_seed: Optional[int] = None
    noise_seed: Optional[int] = None
    init_seed: Optional[int] = None
    train_seed: Optional[int] = None
    # network
    base_channels: int = 32
    expansion_channels: int = 128
    blocks_per_pathway: int = 4
    global_dilations: Tuple[int, ...] = (2, 4, 8, 16)
    intensity_scale: float = 1.0 / 128.0
    # training
    init_scheme: str = "residual"
    mode: str = "lfn"
    loss: str = "l1"
    batch_size: int = 64
    epochs: int = 50
    learning_rate: float = 0.001
    shuffle: bool = True
    checkpoint_every: int = 5
    # evaluation
    correlation_threshold: float = 0.3
    method: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")
        if not (math.isfinite(self.intensity_scale) and self.intensity_scale > 0):
            raise ConfigError(f"intensity_scale must be positive, got {self.intensity_scale}")
        if len(self.split) != 3:
            raise ConfigError(f"split needs three counts (train,val,test), got {self.split}")
        if self.subjects < 1:
            raise ConfigError("subjects must be >= 1")

    # -- parsing ------------------------------------------------------------

    @classmethod
    def casts(cls) -> Dict[str, Callable[[str], Any]]:
        casts = {}
        for f in fields(cls):
            if f.name.endswith("_seed"):
                casts[f.name] = _optional_int
            elif f.name in ("split", "global_dilations"):
                casts[f.name] = _int_tuple
            elif f.type in (bool, "bool"):
                casts[f.name] = _bool
            elif f.type in (int, "int"):
                casts[f.name] = int
            elif f.type in (float, "float"):
                casts[f.name] = float
            else:
                casts[f.name] = str
        return casts

    @classmethod
    def _typed(cls, values: Mapping[str, Any], source: str) -> Dict[str, Any]:
        casts = cls.casts()
        unknown = sorted(set(values) - set(casts))
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {unknown}")
        typed = {}
        for key, raw in values.items():
            if raw is None:
                continue
            if not isinstance(raw, str) and not (key == "shuffle" and isinstance(raw, bool)):
                raw = ",".join(str(v) for v in raw) if isinstance(raw, (list, tuple)) else str(raw)
            try:
                typed[key] = casts[key](raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {raw!r}") from exc
        return typed

    @classmethod
    def from_file(cls, path: PathLike) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#") and "=" not in stripped:
                raise ConfigError(f"{path}:{number}: expected 'key = value', got {stripped!r}")
        repository = RepositoryEnv(str(path))
        return cls._build(cls._typed(repository.data, str(path)))

    @classmethod
    def _build(cls, typed: Dict[str, Any]) -> "RunConfig":
        try:
            return cls(**typed)
        except ConfigError:
            raise
        except DenoisingError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Optional[PathLike] = None, overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """Config file (if any) overlaid with flag values; flags win."""
        base = cls.from_file(path) if path else cls()
        return base.merge(overrides or {})

    def merge(self, overrides: Mapping[str, Any]) -> "RunConfig":
        typed = self._typed({k: v for k, v in overrides.items() if v is not None}, "flags")
        if typed:
            logger.debug(f"config overrides: {sorted(typed)}")
        merged = asdict(self)
        merged.update(typed)
        return self._build(merged)

    # -- derived values -----------------------------------------------------

    def seed_for(self, label: str) -> int:
        """Explicit ``<label>_seed`` if set, else derived from the master seed."""
        if label not in SEED_LABELS:
            raise ConfigError(f"unknown seed label {label!r}")
        explicit = getattr(self, f"{label}_seed")
        return int(explicit) if explicit is not None else derive_seed(self.seed, label)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def method_name(self) -> str:
        return self.method or f"dwan-{self.mode}-{self.loss}"

    def dwan_spec(self) -> DwanSpec:
        try:
            return DwanSpec(
                base_channels=self.base_channels,
                expansion_channels=self.expansion_channels,
                blocks_per_pathway=self.blocks_per_pathway,
                global_dilations=self.global_dilations,
                intensity_scale=self.intensity_scale,
            )
        except DenoisingError as exc:
            raise ConfigError(str(exc)) from exc

    def noise_model(self) -> NoiseModel:
        try:
            return NoiseModel(
                gaussian_sigma=self.sigma,
                outlier_rate=self.outlier_rate,
                outlier_scale=self.outlier_scale,
                correlation_length=self.correlation_length,
                seed=self.seed_for("noise"),
            )
        except DenoisingError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                loss_kind=self.loss,
                batch_size=self.batch_size,
                epochs=self.epochs,
                seed=self.seed_for("train"),
                shuffle=self.shuffle,
                checkpoint_every=self.checkpoint_every,
                learning_rate=self.learning_rate,
            )
        except DenoisingError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> Dict[str, Any]:
        """Resolved config: every key plus the effective subsystem seeds."""
        data = asdict(self)
        data["resolved_seeds"] = {label: self.seed_for(label) for label in SEED_LABELS}
        return data

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)
