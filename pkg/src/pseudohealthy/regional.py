"""Atlas-region uptake and cohort-level regional anomaly reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .phantom import Atlas
from .stats import DegenerateSampleError, TestResult, bonferroni, mann_whitney_u, welch_t_test
from .volume import PathLike, Volume, check_same_grid

TESTS = {"mann_whitney": mann_whitney_u, "welch_t": welch_t_test}


@dataclass
class RegionalUptake:
    image_id: str
    means: Dict[int, float]


def regional_uptake(x: Volume, atlas: Atlas, image_id: str = "") -> RegionalUptake:
    """Mean of ``x`` over every merged atlas region."""
    check_same_grid(x, atlas.labels)
    labels = atlas.merged_labels.ravel()
    n = len(atlas.region_ids) + 1
    sums = np.bincount(labels, weights=np.asarray(x.data, dtype=np.float64).ravel(), minlength=n)
    counts = np.bincount(labels, minlength=n)
    return RegionalUptake(image_id, {r: float(sums[r] / counts[r]) for r in atlas.region_ids})


@dataclass
class RegionResult:
    region_id: int
    region_name: str
    mean_input: float
    mean_recon: float
    result: Optional[TestResult]
    error: str = ""
    mean_reference: Optional[float] = None
    reference: Optional[TestResult] = None

    @property
    def significant(self) -> bool:
        return self.result is not None and self.result.p_adjusted < self.alpha

    alpha: float = 0.05


def regional_anomaly_report(
    pairs: Sequence[Tuple[Volume, Volume]],
    atlas: Atlas,
    method: str = "mann_whitney",
    reference: Optional[Sequence[Volume]] = None,
    alpha: float = 0.05,
) -> List[RegionResult]:
    """Compare input and reconstruction region means across a cohort, region by region.

    The p-values are Bonferroni-corrected over the regions. With ``reference``
    (a CN cohort) the reconstructions are also tested against it. A failing
    test is recorded on its row instead of aborting the report.
    """
    if len(pairs) < 2:
        raise ValueError("need at least two (input, reconstruction) pairs")
    test = TESTS[method]
    inputs = [regional_uptake(x, atlas).means for x, _ in pairs]
    recons = [regional_uptake(y, atlas).means for _, y in pairs]
    refs = [regional_uptake(v, atlas).means for v in reference] if reference else None
    k = len(atlas.region_ids)
    rows = []
    for r in atlas.region_ids:
        a = [m[r] for m in inputs]
        b = [m[r] for m in recons]
        row = RegionResult(r, atlas.region_names.get(r, f"region_{r:02d}"),
                           float(np.mean(a)), float(np.mean(b)), None, alpha=alpha)
        try:
            row.result = _unchanged_result(a, b, method) or test(a, b).adjusted(k)
        except DegenerateSampleError as exc:
            row.error = str(exc)
        if refs is not None:
            c = [m[r] for m in refs]
            row.mean_reference = float(np.mean(c))
            try:
                row.reference = test(b, c).adjusted(k)
            except DegenerateSampleError as exc:
                row.error = (row.error + "; " if row.error else "") + f"reference: {exc}"
        rows.append(row)
    return rows


def _unchanged_result(a, b, method) -> Optional[TestResult]:
    # identical paired samples: no evidence of change, and Welch would be undefined
    if np.array_equal(np.asarray(a), np.asarray(b)):
        return TestResult(0.0 if method == "welch_t" else len(a) * len(b) / 2.0, 1.0,
                          method, len(a), len(b))
    return None


REPORT_COLUMNS = [
    "region_id", "region_name", "mean_input", "mean_recon", "statistic", "p",
    "p_adjusted", "significant",
]


def write_regional_csv(rows: Sequence[RegionResult], path: PathLike) -> Path:
    path = Path(path)
    with_ref = any(r.reference is not None for r in rows)
    columns = REPORT_COLUMNS + (["mean_reference", "p_reference_adjusted"] if with_ref else []) + ["error"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            res = r.result
            line = [
                r.region_id, r.region_name, repr(r.mean_input), repr(r.mean_recon),
                repr(res.statistic) if res else "", repr(res.p_value) if res else "",
                repr(res.p_adjusted) if res else "", str(r.significant).lower(),
            ]
            if with_ref:
                line += [repr(r.mean_reference), repr(r.reference.p_adjusted) if r.reference else ""]
            w.writerow(line + [r.error])
    return path


def regional_summary(rows: Sequence[RegionResult], expected: Optional[Sequence[int]] = None) -> dict:
    significant = [r.region_id for r in rows if r.significant]
    out = {
        "n_regions": len(rows),
        "significant_regions": significant,
        "significant_names": [r.region_name for r in rows if r.significant],
        "errors": {r.region_id: r.error for r in rows if r.error},
    }
    if expected is not None:
        expected = set(expected)
        others = [r for r in rows if r.region_id not in expected]
        out["expected_regions"] = sorted(expected)
        out["expected_detected"] = sorted(expected & set(significant))
        out["false_positive_regions"] = sorted(set(significant) - expected)
        out["non_mask_clean_fraction"] = (
            sum(not r.significant for r in others) / len(others) if others else 1.0
        )
    return out


def violin_data(
    groups: Dict[str, Sequence[Volume]], atlas: Atlas
) -> dict:
    """Per-region value lists per named group, for distribution plots."""
    out = {"regions": {str(r): atlas.region_names.get(r, "") for r in atlas.region_ids}, "series": {}}
    for name, volumes in groups.items():
        means = [regional_uptake(v, atlas).means for v in volumes]
        out["series"][name] = {str(r): [m[r] for m in means] for r in atlas.region_ids}
    return out


def dump_json(obj, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path
