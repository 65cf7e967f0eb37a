"""Subject-level stratified splitting into test, train and validation folds."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..phantom import CohortManifest, CohortRecord
from ..volume import PathLike


class SplitError(ValueError):
    pass


@dataclass
class SplitSpec:
    test_fraction: float = 0.2
    n_folds: int = 6
    stratify_on: List[str] = field(default_factory=lambda: ["sex", "age"])
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        unknown = set(self.stratify_on) - {"sex", "age"}
        if unknown:
            raise ValueError(f"unknown stratification covariates: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(**d)


@dataclass
class CohortSplit:
    test: List[CohortRecord]
    train_folds: List[List[CohortRecord]]
    val_folds: List[List[CohortRecord]]
    strata: Dict[str, str] = field(default_factory=dict)

    @property
    def n_folds(self) -> int:
        return len(self.train_folds)

    def subjects(self, records: Sequence[CohortRecord]) -> set:
        return {r.subject_id for r in records}

    def check_no_leakage(self) -> None:
        """Raise if any subject appears in more than one set of a fold."""
        test = self.subjects(self.test)
        for k in range(self.n_folds):
            tr, va = self.subjects(self.train_folds[k]), self.subjects(self.val_folds[k])
            if tr & va or tr & test or va & test:
                raise SplitError(f"fold {k}: subject sets overlap")

    def to_dict(self) -> dict:
        ids = lambda recs: [r.image_id for r in recs]  # noqa: E731
        return {
            "test": ids(self.test),
            "folds": [{"train": ids(t), "validation": ids(v)} for t, v in zip(self.train_folds, self.val_folds)],
            "strata": self.strata,
        }


def baseline_records(records: Sequence[CohortRecord]) -> List[CohortRecord]:
    """The earliest session of every subject."""
    first: Dict[str, CohortRecord] = {}
    for r in records:
        if r.subject_id not in first or r.session_id < first[r.subject_id].session_id:
            first[r.subject_id] = r
    return [first[s] for s in sorted(first)]


def _age_quartile(ages: Dict[str, float]) -> Dict[str, int]:
    values = np.array(list(ages.values()))
    edges = np.quantile(values, [0.25, 0.5, 0.75])
    return {s: int(np.searchsorted(edges, a, side="right")) for s, a in ages.items()}


def _strata(manifest: CohortManifest, stratify_on: Sequence[str]) -> Dict[str, str]:
    base = baseline_records(manifest.records)
    quart = _age_quartile({r.subject_id: r.age for r in base})
    keys = {}
    for r in base:
        parts = []
        if "sex" in stratify_on:
            parts.append(r.sex)
        if "age" in stratify_on:
            parts.append(f"Q{quart[r.subject_id] + 1}")
        keys[r.subject_id] = "/".join(parts) or "all"
    return keys


def split_cohort(manifest: CohortManifest, spec: SplitSpec) -> CohortSplit:
    """Split by subject: a stratified test set, then stratified folds of the rest.

    Subjects are ordered stratum by stratum (shuffled within each stratum) and
    dealt out systematically, so every set mirrors the stratum proportions.
    Validation and test sets keep baseline sessions only.
    """
    strata = _strata(manifest, spec.stratify_on)
    groups: Dict[str, List[str]] = {}
    for s, key in sorted(strata.items()):
        groups.setdefault(key, []).append(s)
    small = [k for k, v in groups.items() if len(v) < 2]
    if small:
        raise SplitError(f"stratum too small to split: {', '.join(sorted(small))}")
    rng = np.random.default_rng([spec.rng_seed, 21])
    ordered: List[str] = []
    for key in sorted(groups):
        members = groups[key]
        ordered.extend(members[i] for i in rng.permutation(len(members)))
    n = len(ordered)
    n_test = int(np.floor(n * spec.test_fraction + 1e-9))
    if n_test < 1 or n - n_test < spec.n_folds:
        raise SplitError(f"{n} subjects cannot fill a test set and {spec.n_folds} folds")
    phase = rng.random()
    test_ids, rest = set(), []
    for t, s in enumerate(ordered):
        if np.floor((t + 1) * n_test / n + phase) > np.floor(t * n_test / n + phase):
            test_ids.add(s)
        else:
            rest.append(s)
    # systematic sampling may round to one more or fewer; trim deterministically
    while len(test_ids) > n_test:
        s = max(test_ids)
        test_ids.discard(s)
        rest.append(s)
    while len(test_ids) < n_test:
        s = rest.pop()
        test_ids.add(s)
    rest = [s for s in ordered if s not in test_ids]
    offset = int(rng.integers(spec.n_folds))
    fold_of = {s: (t + offset) % spec.n_folds for t, s in enumerate(rest)}

    by_subject: Dict[str, List[CohortRecord]] = {}
    for r in manifest.records:
        by_subject.setdefault(r.subject_id, []).append(r)
    base = {r.subject_id: r for r in baseline_records(manifest.records)}
    test = [base[s] for s in sorted(test_ids)]
    train_folds, val_folds = [], []
    for k in range(spec.n_folds):
        val = [base[s] for s in sorted(rest) if fold_of[s] == k]
        tr = [r for s in sorted(rest) if fold_of[s] != k for r in by_subject[s]]
        train_folds.append(tr)
        val_folds.append(val)
    out = CohortSplit(test, train_folds, val_folds, strata)
    out.check_no_leakage()
    return out


def write_split(split: CohortSplit, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(split.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def read_split(path: PathLike, manifest: CohortManifest) -> CohortSplit:
    d = json.loads(Path(path).read_text())
    index = {r.image_id: r for r in manifest.records}
    try:
        pick = lambda ids: [index[i] for i in ids]  # noqa: E731
        out = CohortSplit(pick(d["test"]), [pick(f["train"]) for f in d["folds"]],
                          [pick(f["validation"]) for f in d["folds"]], d.get("strata", {}))
    except KeyError as exc:
        raise SplitError(f"split references unknown image {exc}") from None
    out.check_no_leakage()
    return out


def stratum_proportions(records: Sequence[CohortRecord]) -> Tuple[float, int]:
    """Female fraction and subject count of a record list (baseline only)."""
    base = baseline_records(records)
    return (sum(r.sex == "F" for r in base) / len(base) if base else 0.0), len(base)


__all__ = ["CohortSplit", "SplitError", "SplitSpec", "baseline_records", "read_split",
           "split_cohort", "stratum_proportions", "write_split"]

