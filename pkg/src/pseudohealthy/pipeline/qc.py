"""Alignment quality control: fraction of uptake that falls outside the brain."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..volume import PathLike, Volume, as_mask, check_same_grid


@dataclass
class QcResult:
    image_id: str
    score: float
    passed: bool


def qc_overlap(x: Volume, outside_brain: Volume, threshold: float = 0.1, image_id: str = "") -> QcResult:
    """score = uptake outside the brain / total uptake; the image fails above ``threshold``."""
    check_same_grid(x, outside_brain)
    data = np.asarray(x.data, dtype=np.float64)
    total = float(data.sum())
    if total <= 0.0:
        raise ValueError("zero total uptake")
    score = float(data[as_mask(outside_brain)].sum()) / total
    return QcResult(image_id, score, score <= threshold)


def write_qc_csv(results: Sequence[QcResult], path: PathLike) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "score", "passed"])
        for r in results:
            w.writerow([r.image_id, repr(r.score), str(r.passed).lower()])
    return path
