"""
Image Quality Metrics
=====================

PSNR, SSIM, ROI SNR, GM/WM contrast and voxelwise correlation maps, plus the
per-subject report table and the 8-bit PGM exports used for figures.

Every metric is evaluated inside the brain region (GM ∪ WM dilated by 2 px);
data_range defaults to the maximum of the pseudo gold standard.
"""

import io
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from django.conf import settings
from PIL import Image
from scipy import ndimage
from skimage.metrics import structural_similarity

from .exceptions import MetricsError, ShapeMismatchError
from .tensor import Tensor
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
ImageLike = Union[np.ndarray, Tensor]

REPORT_COLUMNS = ["subject_id", "method", "psnr_db", "ssim", "snr", "gmwm_contrast"]
METRIC_COLUMNS = REPORT_COLUMNS[2:]
SSIM_WINDOW = 11


def _array(image: ImageLike) -> np.ndarray:
    return np.asarray(image.numpy() if isinstance(image, Tensor) else image, dtype=np.float64)


def _pair(op: str, test: ImageLike, truth: ImageLike):
    a, b = _array(test), _array(truth)
    if a.shape != b.shape:
        raise ShapeMismatchError(op, b.shape, a.shape)
    return a, b


def _mask(mask: Optional[ImageLike], shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = _array(mask) > 0.5
    if mask.shape != shape:
        raise ShapeMismatchError("mask", shape, mask.shape)
    return mask


def psnr_cap() -> float:
    return float(getattr(settings, "ASLDN_PSNR_CAP", 99.0))


def psnr(test: ImageLike, truth: ImageLike, data_range: float, mask: Optional[ImageLike] = None) -> float:
    """10·log10(range² / MSE) in dB; identical images report the cap value."""
    a, b = _pair("psnr", test, truth)
    if not data_range > 0:
        raise MetricsError(f"data_range must be > 0, got {data_range}")
    region = _mask(mask, a.shape)
    mse = float(np.mean((a[region] - b[region]) ** 2))
    if mse == 0.0:
        return psnr_cap()
    return min(10.0 * np.log10(data_range ** 2 / mse), psnr_cap())


def _bounding_box(region: np.ndarray):
    rows = np.flatnonzero(region.any(axis=1))
    cols = np.flatnonzero(region.any(axis=0))
    if rows.size == 0:
        raise MetricsError("empty region")
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def ssim(test: ImageLike, truth: ImageLike, data_range: float, mask: Optional[ImageLike] = None) -> float:
    """
    Mean local SSIM (Gaussian window sigma 1.5, 11x11, K1=0.01, K2=0.03)
    over the bounding box of ``mask``.
    """
    a, b = _pair("ssim", test, truth)
    if not data_range > 0:
        raise MetricsError(f"data_range must be > 0, got {data_range}")
    box = _bounding_box(_mask(mask, a.shape))
    a, b = a[box], b[box]
    if min(a.shape) < SSIM_WINDOW:
        raise MetricsError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape}")
    return float(structural_similarity(
        a, b,
        data_range=data_range,
        gaussian_weights=True,
        sigma=1.5,
        win_size=SSIM_WINDOW,
        use_sample_covariance=False,
    ))


def _region_values(image: np.ndarray, mask: ImageLike, name: str) -> np.ndarray:
    region = _mask(mask, image.shape)
    if not region.any():
        raise MetricsError(f"{name} mask is empty")
    return image[region]


def roi_snr(image: ImageLike, gm_mask: ImageLike, wm_mask: ImageLike) -> float:
    """Mean over the GM ROI divided by the population std over the WM ROI."""
    img = _array(image)
    gm = _region_values(img, gm_mask, "GM")
    wm = _region_values(img, wm_mask, "WM")
    if wm.size < 2:
        raise MetricsError("WM ROI needs at least 2 pixels")
    spread = float(np.std(wm))
    if spread == 0.0:
        return float("inf")
    return float(np.mean(gm)) / spread


def gmwm_contrast(image: ImageLike, gm_mask: ImageLike, wm_mask: ImageLike) -> float:
    img = _array(image)
    gm = _region_values(img, gm_mask, "GM")
    wm_mean = float(np.mean(_region_values(img, wm_mask, "WM")))
    if wm_mean == 0.0:
        raise MetricsError("WM mean is zero; contrast undefined")
    return float(np.mean(gm)) / wm_mean


def correlation_map(outputs: Sequence[ImageLike], references: Sequence[ImageLike],
                    threshold: float = 0.3) -> Tensor:
    """
    Per-pixel Pearson r across subjects between outputs and references.
    r <= threshold and zero-variance pixels are set to 0.
    """
    if len(outputs) != len(references):
        raise MetricsError(f"{len(outputs)} outputs vs {len(references)} references")
    if len(outputs) < 3:
        raise MetricsError(f"correlation map needs at least 3 subjects, got {len(outputs)}")
    x = np.stack([_array(o) for o in outputs])
    y = np.stack([_array(r) for r in references])
    if x.shape != y.shape:
        raise ShapeMismatchError("correlation_map", y.shape, x.shape)

    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cov = (xc * yc).mean(axis=0)
    var_x = (xc ** 2).mean(axis=0)
    var_y = (yc ** 2).mean(axis=0)
    valid = (np.ptp(x, axis=0) > 0) & (np.ptp(y, axis=0) > 0) & (var_x > 0) & (var_y > 0)

    r = np.zeros(x.shape[1:])
    r[valid] = cov[valid] / np.sqrt(var_x[valid] * var_y[valid])
    r = np.clip(r, -1.0, 1.0)
    r[r <= threshold] = 0.0
    return Tensor(r, dtype=np.float64)


# ---------------------------------------------------------------------------
# regions and per-subject rows
# ---------------------------------------------------------------------------

def brain_region(gm_mask: ImageLike, wm_mask: ImageLike, margin: int = 2) -> np.ndarray:
    union = (_array(gm_mask) > 0.5) | (_array(wm_mask) > 0.5)
    if margin <= 0:
        return union
    return ndimage.binary_dilation(union, iterations=margin)


def wm_roi(wm_mask: ImageLike) -> np.ndarray:
    wm = _array(wm_mask) > 0.5
    eroded = ndimage.binary_erosion(wm, iterations=1)
    if eroded.sum() < 2:
        logger.warning("WM erosion left fewer than 2 pixels, using the full WM mask")
        return wm
    return eroded


def evaluate_image(subject_id: str, method: str, image: ImageLike, truth: ImageLike,
                   gm_mask: ImageLike, wm_mask: ImageLike, data_range: float) -> Dict[str, object]:
    """One report row: every metric of ``image`` against ``truth``."""
    region = brain_region(gm_mask, wm_mask)
    return {
        "subject_id": subject_id,
        "method": method,
        "psnr_db": psnr(image, truth, data_range, region),
        "ssim": ssim(image, truth, data_range, region),
        "snr": roi_snr(image, gm_mask, wm_roi(wm_mask)),
        "gmwm_contrast": gmwm_contrast(image, gm_mask, wm_mask),
    }


class MetricsReport:
    """Per-subject metric rows plus per-method correlation maps."""

    def __init__(self, rows: Optional[Iterable[Dict[str, object]]] = None,
                 correlation_maps: Optional[Dict[str, Tensor]] = None):
        self.rows: List[Dict[str, object]] = list(rows or [])
        self.correlation_maps: Dict[str, Tensor] = dict(correlation_maps or {})

    def add(self, row: Dict[str, object]) -> None:
        missing = [c for c in REPORT_COLUMNS if c not in row]
        if missing:
            raise MetricsError(f"report row missing {missing}")
        self.rows.append({c: row[c] for c in REPORT_COLUMNS})

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def methods(self) -> List[str]:
        return list(dict.fromkeys(row["method"] for row in self.rows))

    def to_csv(self, path: PathLike) -> Path:
        text = self.frame.to_csv(index=False, float_format="%.6f", lineterminator="\n")
        return atomic_write_bytes(path, text.encode("utf-8"))

    @classmethod
    def from_csv(cls, path: PathLike) -> "MetricsReport":
        try:
            frame = pd.read_csv(path, dtype={"subject_id": str, "method": str})
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
            raise MetricsError(f"malformed report {path}: {exc}") from exc
        if list(frame.columns) != REPORT_COLUMNS:
            raise MetricsError(f"malformed report {path}: columns {list(frame.columns)}")
        try:
            frame[METRIC_COLUMNS] = frame[METRIC_COLUMNS].astype(float)
        except ValueError as exc:
            raise MetricsError(f"malformed report {path}: {exc}") from exc
        if frame[REPORT_COLUMNS].isna().any().any():
            raise MetricsError(f"malformed report {path}: empty cells")
        return cls(frame.to_dict(orient="records"))

    def aggregate(self) -> pd.DataFrame:
        """Per-method n, mean and population std of every metric."""
        frame = self.frame
        if frame.empty:
            raise MetricsError("cannot aggregate an empty report")
        grouped = frame.groupby("method", sort=False)[METRIC_COLUMNS]
        means = grouped.mean().add_suffix("_mean")
        stds = grouped.std(ddof=0).add_suffix("_std")
        summary = pd.concat([grouped.size().rename("n"), means, stds], axis=1)
        ordered = ["n"] + [f"{m}_{s}" for m in METRIC_COLUMNS for s in ("mean", "std")]
        return summary[ordered].reset_index()


# ---------------------------------------------------------------------------
# 8-bit PGM export
# ---------------------------------------------------------------------------

def display_range() -> tuple:
    lo, hi = getattr(settings, "ASLDN_DISPLAY_RANGE", (0.0, 120.0))
    return float(lo), float(hi)


def window(image: ImageLike, lo: Optional[float] = None, hi: Optional[float] = None) -> np.ndarray:
    """Linear map of [lo, hi] onto gray levels 0..255."""
    default_lo, default_hi = display_range()
    lo = default_lo if lo is None else lo
    hi = default_hi if hi is None else hi
    if not hi > lo:
        raise MetricsError(f"display window [{lo}, {hi}] is empty")
    scaled = np.clip((_array(image) - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def _write_pgm(gray: np.ndarray, path: PathLike) -> Path:
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(gray, dtype=np.uint8)).save(buffer, format="PPM")
    return atomic_write_bytes(path, buffer.getvalue())


def save_pgm(image: ImageLike, path: PathLike, lo: Optional[float] = None, hi: Optional[float] = None) -> Path:
    return _write_pgm(window(image, lo, hi), path)


def correlation_pgm(rmap: ImageLike, path: PathLike, threshold: float = 0.3) -> Path:
    """r in (threshold, 1] maps to gray 1..255; thresholded pixels stay 0."""
    r = _array(rmap)
    gray = np.zeros(r.shape, dtype=np.uint8)
    kept = r > threshold
    gray[kept] = np.clip(1 + np.round((r[kept] - threshold) / (1.0 - threshold) * 254.0), 1, 255)
    return _write_pgm(gray, path)


def panel_pgm(rows: Sequence[ImageLike], path: PathLike, lo: Optional[float] = None,
              hi: Optional[float] = None) -> Path:
    """Stack windowed images top to bottom with a one-pixel black separator."""
    if not rows:
        raise MetricsError("panel needs at least one image")
    tiles = [window(row, lo, hi) for row in rows]
    width = tiles[0].shape[1]
    if any(t.shape[1] != width for t in tiles):
        raise ShapeMismatchError("panel_pgm", f"width {width}", [t.shape for t in tiles])
    separator = np.zeros((1, width), dtype=np.uint8)
    stacked = [tiles[0]]
    for tile in tiles[1:]:
        stacked.extend([separator, tile])
    return _write_pgm(np.vstack(stacked), path)
