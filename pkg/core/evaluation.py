"""
Evaluation of a trained denoiser on a dataset split.

Runs inference on each subject's test input, scores input and output against
the pseudo gold standard and against the known clean image, and builds the
cross-subject correlation maps.
"""

import logging
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from joblib import Parallel, delayed

from .exceptions import DatasetError
from .metrics import (
    MetricsReport,
    brain_region,
    correlation_map,
    correlation_pgm,
    evaluate_image,
    panel_pgm,
    psnr,
)
from .network import DwanSpec, NetworkParameters, denoise_image
from .phantom import DatasetManifest
from .tensor_io import save_tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class SubjectEvaluation:
    subject_id: str
    input: np.ndarray
    output: np.ndarray
    pgs: np.ndarray
    clean: np.ndarray
    rows_vs_pgs: List[Dict[str, object]] = field(default_factory=list)
    rows_vs_clean: List[Dict[str, object]] = field(default_factory=list)


@dataclass
class EvaluationResult:
    method: str
    subjects: List[SubjectEvaluation]
    report: MetricsReport
    report_vs_clean: MetricsReport


def _load(manifest: DatasetManifest, subject_id: str, name: str) -> np.ndarray:
    return np.asarray(manifest.load_array(subject_id, name).numpy(), dtype=np.float64)


def _data_range(pgs: np.ndarray, subject_id: str) -> float:
    peak = float(np.max(pgs))
    if not peak > 0:
        raise DatasetError(f"{subject_id}: pseudo gold standard has no positive values")
    return peak


def evaluate_subject(params: NetworkParameters, spec: DwanSpec, manifest: DatasetManifest,
                     subject_id: str, method: str) -> SubjectEvaluation:
    load = partial(_load, manifest, subject_id)
    test_input, pgs, clean = load("input1"), load("pgs"), load("clean")
    gm, wm = load("gm_mask"), load("wm_mask")
    output = denoise_image(params, test_input, spec).astype(np.float64)
    data_range = _data_range(pgs, subject_id)

    result = SubjectEvaluation(subject_id, test_input, output, pgs, clean)
    for name, image in (("input", test_input), (method, output)):
        result.rows_vs_pgs.append(evaluate_image(subject_id, name, image, pgs, gm, wm, data_range))
    for name, image in (("input", test_input), (method, output), ("pgs", pgs)):
        result.rows_vs_clean.append(evaluate_image(subject_id, name, image, clean, gm, wm, data_range))
    return result


def evaluate_split(params: NetworkParameters, spec: DwanSpec, manifest: DatasetManifest, method: str,
                   role: str = "test", n_jobs: int = 1, correlation_threshold: float = 0.3) -> EvaluationResult:
    entries = manifest.subjects(role)
    if not entries:
        raise DatasetError(f"no {role} subjects in {manifest.root}")

    logger.info(f"📊 Evaluating {method} on {len(entries)} {role} subjects")
    subjects = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(evaluate_subject)(params, spec, manifest, entry.subject_id, method) for entry in entries
    )

    report = MetricsReport()
    report_vs_clean = MetricsReport()
    for subject in subjects:
        for row in subject.rows_vs_pgs:
            report.add(row)
        for row in subject.rows_vs_clean:
            report_vs_clean.add(row)

    if len(subjects) >= 3:
        references = [s.pgs for s in subjects]
        report.correlation_maps["input"] = correlation_map([s.input for s in subjects], references,
                                                           correlation_threshold)
        report.correlation_maps[method] = correlation_map([s.output for s in subjects], references,
                                                          correlation_threshold)
    else:
        logger.warning(f"⚠️ {len(subjects)} {role} subjects: correlation maps need at least 3, skipped")
    return EvaluationResult(method, subjects, report, report_vs_clean)


def write_evaluation(result: EvaluationResult, out_dir: PathLike, correlation_threshold: float = 0.3) -> List[Path]:
    """report.csv, report_vs_clean.csv, correlation maps and per-subject panels."""
    out_dir = Path(out_dir)
    written = [
        result.report.to_csv(out_dir / "report.csv"),
        result.report_vs_clean.to_csv(out_dir / "report_vs_clean.csv"),
    ]
    for method, rmap in result.report.correlation_maps.items():
        written.append(save_tensor(rmap, out_dir / f"correlation_{method}.aslt"))
        written.append(correlation_pgm(rmap, out_dir / f"correlation_{method}.pgm", correlation_threshold))
    for subject in result.subjects:
        # rows mirror the figure layout: input, pseudo gold standard, output
        written.append(panel_pgm([subject.input, subject.pgs, subject.output],
                                 out_dir / "panels" / f"{subject.subject_id}.pgm"))
    return written


def validation_psnr(params: NetworkParameters, spec: DwanSpec, manifest: DatasetManifest,
                    role: str = "val") -> Optional[float]:
    """Mean PSNR of the denoised validation inputs against their pseudo gold standards."""
    entries = manifest.subjects(role)
    if not entries:
        return None
    scores = []
    for entry in entries:
        load = partial(_load, manifest, entry.subject_id)
        pgs = load("pgs")
        output = denoise_image(params, load("input1"), spec)
        region = brain_region(load("gm_mask"), load("wm_mask"))
        scores.append(psnr(output, pgs, _data_range(pgs, entry.subject_id), region))
    return float(np.mean(scores))
