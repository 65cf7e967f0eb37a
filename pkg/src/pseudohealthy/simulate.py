"""Hypometabolism simulation on healthy volumes."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .phantom import SUBTYPES, Atlas, CohortManifest, CohortRecord
from .volume import PathLike, Volume, VolumeError, as_mask, check_same_grid, gaussian_smooth, save_volume

DEFAULT_AD_SEVERITIES = (0.05, 0.10, 0.15, 0.20, 0.30, 0.50, 0.70)
SUBTYPE_SEVERITY = 0.30


@dataclass(frozen=True)
class SimulationSpec:
    subtype: str = "AD"
    severity: float = 0.30
    smoothing_sigma_mm: float = 5.0

    def __post_init__(self):
        if self.subtype not in SUBTYPES:
            raise ValueError(f"unknown subtype {self.subtype!r}")
        if not 0 < self.severity <= 1:
            raise ValueError(f"severity must be in (0, 1], got {self.severity}")
        if self.smoothing_sigma_mm < 0:
            raise ValueError("smoothing sigma must be >= 0")

    @property
    def set_name(self) -> str:
        return f"{self.subtype}_{int(round(self.severity * 100)):02d}"

    @property
    def mask_id(self) -> str:
        return f"{self.subtype}_s{self.smoothing_sigma_mm:g}mm"


def build_subtype_mask(atlas: Atlas, subtype: str) -> Volume:
    if subtype not in atlas.subtype_regions:
        raise KeyError(f"unknown subtype {subtype!r}; atlas knows {sorted(atlas.subtype_regions)}")
    return atlas.region_mask(atlas.subtype_regions[subtype])


def smooth_mask(m: Volume, sigma_mm: float) -> Volume:
    """Blurred 0/1 mask, clamped to [0, 1]."""
    binary = as_mask(m).astype(np.float64)
    smoothed = gaussian_smooth(m.with_data(binary), sigma_mm).data
    return m.with_data(np.clip(smoothed, 0.0, 1.0))


def simulate_hypometabolism(x: Volume, w: Volume, severity: float) -> Volume:
    """Attenuate uptake as ``x * (1 - severity * w)``."""
    check_same_grid(x, w)
    if not 0 < severity <= 1:
        raise VolumeError(f"severity must be in (0, 1], got {severity}")
    weights = np.asarray(w.data, dtype=np.float64)
    if weights.min() < 0 or weights.max() > 1:
        raise VolumeError("weight mask values must lie in [0, 1]")
    out = np.asarray(x.data, dtype=np.float64) * (1.0 - severity * weights)
    return x.with_data(out.astype(x.data.dtype, copy=False))


@dataclass
class SimulatedRecord:
    source_path: str
    simulated_path: str
    subtype: str
    severity: float
    mask_id: str
    image_id: str
    set_name: str


def default_specs(
    severities: Sequence[float] = DEFAULT_AD_SEVERITIES,
    subtypes: Sequence[str] = tuple(s for s in SUBTYPES if s != "AD"),
    sigma_mm: float = 5.0,
    subtype_severity: float = SUBTYPE_SEVERITY,
) -> List[SimulationSpec]:
    specs = [SimulationSpec("AD", float(f), sigma_mm) for f in severities]
    for s in subtypes:
        if s not in SUBTYPES or s == "AD":
            raise ValueError(f"subtype list must hold non-AD subtypes, got {s!r}")
        specs.append(SimulationSpec(s, subtype_severity, sigma_mm))
    return specs


def weight_masks(atlas: Atlas, specs: Sequence[SimulationSpec]) -> Dict[str, Volume]:
    masks = {}
    for spec in specs:
        if spec.mask_id not in masks:
            masks[spec.mask_id] = smooth_mask(build_subtype_mask(atlas, spec.subtype), spec.smoothing_sigma_mm)
    return masks


def materialize_test_sets(
    cohort: CohortManifest,
    atlas: Atlas,
    severities: Sequence[float],
    subtypes: Sequence[str],
    out_dir: PathLike,
    sigma_mm: float = 5.0,
    subtype_severity: float = SUBTYPE_SEVERITY,
    records: Optional[Sequence[CohortRecord]] = None,
) -> List[SimulatedRecord]:
    """Write one simulated copy of every test image per set, plus ``simulated.jsonl``.

    One AD set per severity, one ``subtype_severity`` set per extra subtype.
    """
    if not severities and not subtypes:
        raise ValueError("nothing to simulate: empty severity and subtype lists")
    specs = default_specs(severities, subtypes, sigma_mm, subtype_severity)
    masks = weight_masks(atlas, specs)
    out = Path(out_dir)
    records = list(records if records is not None else cohort.records)
    sources = {r.image_id: cohort.load(r) for r in records}
    entries = []
    for spec in specs:
        set_dir = out / spec.set_name
        set_dir.mkdir(parents=True, exist_ok=True)
        for r in records:
            sim = simulate_hypometabolism(sources[r.image_id], masks[spec.mask_id], spec.severity)
            stem = set_dir / r.image_id
            save_volume(sim, stem)
            entries.append(
                SimulatedRecord(
                    source_path=str(cohort.resolve(r)),
                    simulated_path=str(stem),
                    subtype=spec.subtype,
                    severity=spec.severity,
                    mask_id=spec.mask_id,
                    image_id=r.image_id,
                    set_name=spec.set_name,
                )
            )
    write_simulated_manifest(entries, out / "simulated.jsonl")
    return entries


def write_simulated_manifest(entries: Sequence[SimulatedRecord], path: PathLike) -> Path:
    path = Path(path)
    base = path.parent
    lines = []
    for e in entries:
        rec = dict(e.__dict__)
        for key in ("source_path", "simulated_path"):
            rec[key] = os.path.relpath(Path(rec[key]).resolve(), base.resolve())
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_simulated_manifest(path: PathLike) -> List[SimulatedRecord]:
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("source_path", "simulated_path"):
            if not Path(rec[key]).is_absolute():
                rec[key] = str(path.parent / rec[key])
        out.append(SimulatedRecord(**rec))
    return out
