"""
Synthetic ASL Phantom Simulator
===============================

Generates brain-like 2-D CBF subjects (cortical GM ribbon, subcortical GM
blobs, WM interior), a 40-frame noisy CBF series per subject, and the data
preparation used for training: segment means of 10 successive frames and the
pseudo gold standard (outlier-cleaned mean of all 40 frames + Gaussian blur).

Frames are modeled post-subtraction: label/control pairing, M0 calibration,
motion correction and registration are not simulated.
"""

import logging
import os
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import ndimage
from tqdm import tqdm

from .exceptions import DatasetError, InvalidArgumentError, ShapeMismatchError
from .tensor import Tensor
from .tensor_io import load_tensor, save_tensor
from .utils import derive_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FRAMES = 40
SEGMENT_LENGTH = 10
FWHM_PER_SIGMA = 2.3548

GM_CBF = 60.0
WM_CBF = 25.0

SUBJECT_FILES = ("clean", "gm_mask", "wm_mask", "series", "input1", "ref1", "input2", "ref2", "pgs")
ROLES = ("train", "val", "test")


@dataclass(frozen=True)
class NoiseModel:
    """
    Per-frame noise law. sigma == 0 means noise-free frames; outlier frames get
    noise scaled by ``outlier_scale`` plus a positive regional spike.
    """

    gaussian_sigma: float
    outlier_rate: float = 0.0
    outlier_scale: float = 10.0
    correlation_length: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise InvalidArgumentError(f"gaussian_sigma must be >= 0, got {self.gaussian_sigma}")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise InvalidArgumentError(f"outlier_rate must be in [0, 1), got {self.outlier_rate}")
        if self.outlier_rate > 0 and self.outlier_scale <= 1.0:
            raise InvalidArgumentError("outlier_scale must be > 1 when outlier_rate > 0")
        if self.correlation_length < 0:
            raise InvalidArgumentError("correlation_length must be >= 0")


# Calibrated so the pseudo gold standard ROI SNR lands near the clinically
# observed regime (≈6 on 64x64 subjects).
STANDARD_NOISE = NoiseModel(gaussian_sigma=120.0)
STANDARD_FWHM_PX = 1.5


@dataclass
class PhantomSubject:
    subject_id: str
    clean_cbf: Tensor
    gm_mask: Tensor
    wm_mask: Tensor
    series: Tensor
    outlier_flags: List[bool]

    @property
    def gm(self) -> np.ndarray:
        return self.gm_mask.numpy() > 0.5

    @property
    def wm(self) -> np.ndarray:
        return self.wm_mask.numpy() > 0.5

    @property
    def brain(self) -> np.ndarray:
        return self.gm | self.wm

    @property
    def shape(self) -> Tuple[int, int]:
        return self.clean_cbf.shape


class SegmentMeans(NamedTuple):
    input1: Tensor
    ref1: Tensor
    input2: Tensor
    ref2: Tensor
    test_input: Tensor


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _tissue_masks(rng: np.random.Generator, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    height, width = shape
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy = (height - 1) / 2.0 + rng.uniform(-0.03, 0.03) * height
    cx = (width - 1) / 2.0 + rng.uniform(-0.03, 0.03) * width
    ay = 0.44 * height * (1.0 + rng.uniform(-0.05, 0.05))
    ax = 0.38 * width * (1.0 + rng.uniform(-0.05, 0.05))

    radius = np.hypot((yy - cy) / ay, (xx - cx) / ax)
    angle = np.arctan2(yy - cy, xx - cx)
    brain = radius <= 1.0

    # folded inner boundary of the cortical ribbon
    folds = rng.integers(5, 9)
    inner = (0.72 + 0.06 * np.sin(folds * angle + rng.uniform(0, 2 * np.pi))
             + 0.03 * np.sin((folds + 3) * angle + rng.uniform(0, 2 * np.pi)))
    cortex = brain & (radius > inner)

    # paired deep GM nuclei
    deep = np.zeros(shape, dtype=bool)
    dx = 0.32 * ax * (1.0 + rng.uniform(-0.1, 0.1))
    dy = rng.uniform(-0.08, 0.08) * ay
    ry = 0.14 * ay * (1.0 + rng.uniform(-0.15, 0.15))
    rx = 0.10 * ax * (1.0 + rng.uniform(-0.15, 0.15))
    for side in (-1.0, 1.0):
        deep |= np.hypot((yy - cy - dy) / ry, (xx - cx - side * dx) / rx) <= 1.0

    gm = cortex | (deep & brain)
    wm = brain & ~gm
    return gm, wm


def _variation_field(rng: np.random.Generator, gm: np.ndarray, wm: np.ndarray,
                     amplitude: float) -> np.ndarray:
    """Smooth multiplicative field, zero-mean within each tissue, |field| <= amplitude."""
    height, width = gm.shape
    smooth = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=max(height, width) / 8.0,
                                     mode="reflect")
    field = np.zeros_like(smooth)
    for mask in (gm, wm):
        values = smooth[mask] - smooth[mask].mean()
        peak = np.abs(values).max()
        if peak > 0:
            field[mask] = amplitude * values / peak
    return field


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def _unit_noise(rng: np.random.Generator, shape: Tuple[int, int], correlation_length: float) -> np.ndarray:
    white = rng.standard_normal(shape)
    if correlation_length <= 0:
        return white
    # renormalize by the kernel's L2 norm so every pixel keeps unit variance
    smooth = ndimage.gaussian_filter(white, sigma=correlation_length, mode="wrap")
    delta = np.zeros(shape)
    delta[shape[0] // 2, shape[1] // 2] = 1.0
    kernel = ndimage.gaussian_filter(delta, sigma=correlation_length, mode="wrap")
    return smooth / np.sqrt(np.sum(kernel ** 2))


def _regional_spike(rng: np.random.Generator, brain: np.ndarray, amplitude: float) -> np.ndarray:
    height, width = brain.shape
    candidates = np.argwhere(brain)
    cy, cx = candidates[rng.integers(len(candidates))]
    radius = max(height, width) / 8.0
    yy, xx = np.mgrid[0:height, 0:width]
    return amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))


def generate_subject(geometry_seed: int, noise: NoiseModel, shape: Tuple[int, int] = (64, 64),
                     subject_id: str = "s0000", gm_cbf: float = GM_CBF, wm_cbf: float = WM_CBF,
                     spatial_variation: float = 0.15) -> PhantomSubject:
    """One synthetic subject: clean CBF, tissue masks and a 40-frame noisy series."""
    height, width = shape
    if height < 32 or width < 32:
        raise InvalidArgumentError(f"phantom needs H,W >= 32, got {shape}")
    if not 0 <= spatial_variation < 1:
        raise InvalidArgumentError("spatial_variation must be in [0, 1)")

    geo_rng = np.random.default_rng(geometry_seed)
    gm, wm = _tissue_masks(geo_rng, (height, width))
    clean = np.zeros((height, width))
    clean[gm] = gm_cbf
    clean[wm] = wm_cbf
    if spatial_variation > 0:
        clean *= 1.0 + _variation_field(geo_rng, gm, wm, spatial_variation)

    noise_rng = np.random.default_rng(noise.seed)
    n_outliers = int(round(noise.outlier_rate * FRAMES))
    outliers = set(int(k) for k in noise_rng.choice(FRAMES, size=n_outliers, replace=False)) if n_outliers else set()

    series = np.repeat(clean[None], FRAMES, axis=0)
    if noise.gaussian_sigma > 0:
        for k in range(FRAMES):
            frame_noise = noise.gaussian_sigma * _unit_noise(noise_rng, (height, width), noise.correlation_length)
            if k in outliers:
                frame_noise = noise.outlier_scale * frame_noise
                frame_noise += _regional_spike(noise_rng, gm | wm, noise.outlier_scale * noise.gaussian_sigma)
            series[k] += frame_noise

    flags = [k in outliers for k in range(FRAMES)]
    return PhantomSubject(
        subject_id=subject_id,
        clean_cbf=Tensor(clean),
        gm_mask=Tensor(gm),
        wm_mask=Tensor(wm),
        series=Tensor(series),
        outlier_flags=flags,
    )


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def _series_array(subject: PhantomSubject) -> np.ndarray:
    series = np.asarray(subject.series.numpy(), dtype=np.float64)
    if series.ndim != 3 or series.shape[0] != FRAMES:
        raise ShapeMismatchError("segment_means", f"[{FRAMES},H,W] series", series.shape)
    return series


def segment_means(subject: PhantomSubject) -> SegmentMeans:
    """Means of the four 10-frame segments; segment 1 doubles as the test input."""
    series = _series_array(subject)
    means = [Tensor(series[k * SEGMENT_LENGTH:(k + 1) * SEGMENT_LENGTH].mean(axis=0)) for k in range(4)]
    return SegmentMeans(means[0], means[1], means[2], means[3], means[0])


def detect_outlier_frames(series: np.ndarray, mask: Optional[np.ndarray] = None,
                          z_threshold: float = 2.5, scale_floor: float = 0.05) -> np.ndarray:
    """
    Flag frames whose mean absolute deviation from the median image is a
    robust-z outlier. The robust scale is floored at ``scale_floor`` times the
    median score.
    """
    series = np.asarray(series, dtype=np.float64)
    mask = np.ones(series.shape[1:], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    median_image = np.median(series, axis=0)
    scores = np.abs(series[:, mask] - median_image[mask]).mean(axis=1)
    center = np.median(scores)
    scale = max(1.4826 * np.median(np.abs(scores - center)), scale_floor * center)
    if scale == 0:
        return scores > center
    return (scores - center) / scale > z_threshold


def gaussian_blur(image: np.ndarray, fwhm_px: float) -> np.ndarray:
    """Normalized Gaussian blur, sigma = fwhm/2.3548, truncated at 3 sigma, zero borders."""
    if not fwhm_px > 0:
        raise InvalidArgumentError(f"fwhm_px must be > 0, got {fwhm_px}")
    return ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma=fwhm_px / FWHM_PER_SIGMA,
                                   mode="constant", cval=0.0, truncate=3.0)


def cleaned_mean(subject: PhantomSubject, z_threshold: float = 2.5) -> Tuple[np.ndarray, np.ndarray]:
    """Mean of the frames surviving outlier cleaning, plus the discard flags."""
    series = _series_array(subject)
    discard = detect_outlier_frames(series, subject.brain, z_threshold)
    if discard.all():
        raise DatasetError(f"{subject.subject_id}: outlier cleaning discarded every frame")
    if discard.any():
        logger.info(f"{subject.subject_id}: discarded outlier frames {np.flatnonzero(discard).tolist()}")
    return series[~discard].mean(axis=0), discard


def pseudo_gold_standard(subject: PhantomSubject, fwhm_px: float = STANDARD_FWHM_PX,
                         z_threshold: float = 2.5) -> Tensor:
    if not fwhm_px > 0:
        raise InvalidArgumentError(f"fwhm_px must be > 0, got {fwhm_px}")
    mean, _ = cleaned_mean(subject, z_threshold)
    return Tensor(gaussian_blur(mean, fwhm_px))


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    role: str
    seed: int


@dataclass
class DatasetManifest:
    root: Path
    entries: List[ManifestEntry]

    MANIFEST = "manifest.tsv"

    @classmethod
    def load(cls, root: PathLike) -> "DatasetManifest":
        root = Path(root)
        path = root / cls.MANIFEST
        if not path.exists():
            raise DatasetError(f"no dataset manifest at {path}")
        frame = pd.read_csv(path, sep="\t", dtype={"id": str, "role": str, "seed": np.int64})
        if list(frame.columns) != ["id", "role", "seed"]:
            raise DatasetError(f"{path}: expected columns id, role, seed; got {list(frame.columns)}")
        entries = [ManifestEntry(row.id, row.role, int(row.seed)) for row in frame.itertuples(index=False)]
        manifest = cls(root, entries)
        manifest.validate()
        return manifest

    def validate(self) -> None:
        ids = [entry.subject_id for entry in self.entries]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise DatasetError(f"duplicate subject ids {duplicates}")
        unknown = sorted({entry.role for entry in self.entries} - set(ROLES))
        if unknown:
            raise DatasetError(f"unknown roles {unknown}")

    def write(self) -> Path:
        self.validate()
        frame = pd.DataFrame(
            [(e.subject_id, e.role, e.seed) for e in self.entries], columns=["id", "role", "seed"]
        )
        path = self.root / self.MANIFEST
        frame.to_csv(path, sep="\t", index=False)
        return path

    def subjects(self, role: Optional[str] = None) -> List[ManifestEntry]:
        return [e for e in self.entries if role is None or e.role == role]

    def subject_dir(self, subject_id: str) -> Path:
        return self.root / "subjects" / subject_id

    def load_array(self, subject_id: str, name: str) -> Tensor:
        path = self.subject_dir(subject_id) / f"{name}.aslt"
        if not path.exists():
            raise DatasetError(f"missing subject file {path}")
        return load_tensor(path)

    def training_pairs(self, mode: str = "lfn", role: str = "train") -> List[Tuple[Path, Path]]:
        """
        Input/reference file pairs: ``lfn`` pairs noisy segment means
        (input1, ref1), (input2, ref2); ``gold`` pairs each input with the
        pseudo gold standard.
        """
        if mode not in ("lfn", "gold"):
            raise InvalidArgumentError(f"unknown training mode {mode!r}")
        refs = ("ref1", "ref2") if mode == "lfn" else ("pgs", "pgs")
        pairs = []
        for entry in self.subjects(role):
            folder = self.subject_dir(entry.subject_id)
            for source, ref in zip(("input1", "input2"), refs):
                pairs.append((folder / f"{source}.aslt", folder / f"{ref}.aslt"))
        return pairs

    def load_pairs(self, mode: str = "lfn", role: str = "train") -> List[Tuple[Tensor, Tensor]]:
        pairs = []
        for source, ref in self.training_pairs(mode, role):
            for path in (source, ref):
                if not path.exists():
                    raise DatasetError(f"missing subject file {path}")
            pairs.append((load_tensor(source), load_tensor(ref)))
        return pairs

    def load_subject(self, subject_id: str) -> PhantomSubject:
        flags_path = self.subject_dir(subject_id) / "outlier_flags.aslt"
        flags = [bool(v) for v in load_tensor(flags_path).numpy()] if flags_path.exists() else [False] * FRAMES
        return PhantomSubject(
            subject_id=subject_id,
            clean_cbf=self.load_array(subject_id, "clean"),
            gm_mask=self.load_array(subject_id, "gm_mask"),
            wm_mask=self.load_array(subject_id, "wm_mask"),
            series=self.load_array(subject_id, "series"),
            outlier_flags=flags,
        )


def _write_subject(root: Path, entry: ManifestEntry, noise: NoiseModel, shape: Tuple[int, int],
                   fwhm_px: float) -> str:
    subject_noise = replace(noise, seed=derive_seed(noise.seed, entry.subject_id))
    subject = generate_subject(entry.seed, subject_noise, shape, subject_id=entry.subject_id)
    means = segment_means(subject)
    arrays: Dict[str, Tensor] = {
        "clean": subject.clean_cbf,
        "gm_mask": subject.gm_mask,
        "wm_mask": subject.wm_mask,
        "series": subject.series,
        "input1": means.input1,
        "ref1": means.ref1,
        "input2": means.input2,
        "ref2": means.ref2,
        "pgs": pseudo_gold_standard(subject, fwhm_px),
        "outlier_flags": Tensor(np.asarray(subject.outlier_flags, dtype=np.float64)),
    }

    final = root / "subjects" / entry.subject_id
    staging = root / "subjects" / f".tmp-{entry.subject_id}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    for name, tensor in arrays.items():
        save_tensor(tensor, staging / f"{name}.aslt")
    if final.exists():
        shutil.rmtree(final)
    os.replace(staging, final)
    return entry.subject_id


def build_dataset(n_subjects: int, noise: NoiseModel, shape: Tuple[int, int],
                  split: Sequence[int], out_dir: PathLike, seed: int = 0,
                  fwhm_px: float = STANDARD_FWHM_PX, n_jobs: int = 1,
                  progress: bool = False) -> DatasetManifest:
    """
    Generate and write ``n_subjects`` subjects plus ``manifest.tsv``.

    Roles are assigned in order (train, then val, then test); geometry seeds
    derive from ``seed`` and noise seeds from ``noise.seed``, both keyed by
    subject id.
    """
    split = tuple(int(s) for s in split)
    if len(split) != 3 or any(s < 0 for s in split):
        raise InvalidArgumentError(f"split must be three non-negative counts, got {split}")
    if sum(split) != n_subjects:
        raise InvalidArgumentError(f"split {split} does not add up to {n_subjects} subjects")

    root = Path(out_dir)
    (root / "subjects").mkdir(parents=True, exist_ok=True)
    roles = [role for role, count in zip(ROLES, split) for _ in range(count)]
    entries = [
        ManifestEntry(f"s{index:04d}", role, derive_seed(seed, f"s{index:04d}"))
        for index, role in enumerate(roles)
    ]
    manifest = DatasetManifest(root, entries)
    manifest.validate()

    logger.info(f"🧠 Simulating {n_subjects} subjects ({shape[0]}x{shape[1]}, sigma={noise.gaussian_sigma}) "
                f"into {root}")
    jobs = (delayed(_write_subject)(root, entry, noise, tuple(shape), fwhm_px) for entry in entries)
    done = Parallel(n_jobs=n_jobs, prefer="threads")(
        tqdm(jobs, total=len(entries), desc="Simulating", disable=not progress)
    )
    manifest.write()
    logger.info(f"✅ Wrote {len(done)} subjects, {len(manifest.training_pairs())} training pairs")
    return manifest
