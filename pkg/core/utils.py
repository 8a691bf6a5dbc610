"""
Pipeline Utilities
==================

File plumbing shared by the engine and the management commands: atomic
writes, content digests, JSON conversion of numpy values and the
parallelism cap.
"""

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Union

import numpy as np
from django.conf import settings

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def convert_numpy_types(obj: Any) -> Any:
    """Recursively convert numpy types to Python native types"""
    if isinstance(obj, dict):
        return {key: convert_numpy_types(value) for key, value in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [convert_numpy_types(item) for item in obj]
    elif isinstance(obj, Path):
        return str(obj)
    elif isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write ``payload`` to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def write_json(path: PathLike, data: Dict[str, Any]) -> Path:
    """Deterministic JSON dump (sorted keys, trailing newline)."""
    text = json.dumps(convert_numpy_types(data), indent=2, sort_keys=True) + "\n"
    return atomic_write_bytes(path, text.encode("utf-8"))


def file_digest(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digests(root: PathLike, patterns: Iterable[str] = ("**/*",)) -> Dict[str, str]:
    """SHA-256 of every file under ``root`` keyed by relative path."""
    root = Path(root)
    digests = {}
    for pattern in patterns:
        for path in sorted(root.glob(pattern)):
            if path.is_file():
                digests[path.relative_to(root).as_posix()] = file_digest(path)
    return digests


def worker_count() -> int:
    """Parallelism cap from ASLDN_THREADS (at least 1)."""
    threads = getattr(settings, "ASLDN_THREADS", 1)
    if threads < 1:
        logger.warning(f"ASLDN_THREADS={threads} is not positive, using 1")
        return 1
    return threads


def derive_seed(master: int, label: str) -> int:
    """
    Subsystem seed from one master seed: the first four bytes (big-endian)
    of SHA-256("<master>:<label>").
    """
    digest = hashlib.sha256(f"{int(master)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")
