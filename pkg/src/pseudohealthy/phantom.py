"""Deterministic synthetic brain phantoms, atlas and cohorts.

The "brain" is an ellipsoid with a cortical shell and a deep core. Regions
are angular sectors of each radial band, further split into left/right fine
labels that merge back into the regions used for scoring.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume import PathLike, Volume, gaussian_smooth, load_volume, save_volume

SUBTYPES = ("AD", "bvFTD", "PCA", "lvPPA", "nfvPPA", "svPPA")

# 23-region layout: superior ring, inferior ring (9 sectors each, clockwise from
# anterior seen from above) and the deep core (5 sectors).
REGION_NAMES_23 = (
    "dorsolateral_prefrontal", "motor", "sensory", "lateral_parietal", "medial_parietal",
    "posterior_cingulate", "middle_cingulate", "anterior_cingulate", "ventromedial_prefrontal",
    "orbitofrontal", "opercular", "insula", "lateral_temporal", "medial_occipital",
    "lateral_occipital", "cerebellum", "medial_temporal", "temporal_pole",
    "hippocampus", "amygdala", "thalamus", "midbrain", "cerebellar_vermis",
)

DEFAULT_SUBTYPE_REGIONS_23 = {
    "AD": ["lateral_temporal", "medial_temporal", "temporal_pole", "lateral_parietal",
           "medial_parietal", "hippocampus", "amygdala"],
    "bvFTD": ["orbitofrontal", "dorsolateral_prefrontal", "ventromedial_prefrontal"],
    "PCA": ["medial_occipital", "lateral_occipital"],
    "lvPPA": ["lateral_parietal", "lateral_temporal"],
    "nfvPPA": ["opercular", "motor", "insula"],
    "svPPA": ["hippocampus", "amygdala", "temporal_pole"],
}

SHELL_UPTAKE = 0.6
DEEP_UPTAKE = 0.45
_SEMI_AXES = (0.78, 0.90, 0.72)  # fraction of the half field of view
_CORE_RADIUS = 0.62


class AtlasError(ValueError):
    pass


@dataclass
class Atlas:
    """Fine label field plus the tables that merge labels into scoring regions."""

    labels: Volume
    label_table: Dict[int, str]
    merge_map: Dict[int, int]
    region_names: Dict[int, str]
    subtype_regions: Dict[str, List[int]] = field(default_factory=dict)

    def __post_init__(self):
        present = set(np.unique(self.labels.data).tolist()) - {0}
        missing = present - set(self.label_table)
        if missing:
            raise AtlasError(f"labels {sorted(missing)} missing from the label table")
        if set(self.merge_map) != set(self.label_table):
            raise AtlasError("merge map must cover exactly the label table")
        merged = sorted(set(self.merge_map.values()))
        if merged != list(range(1, len(merged) + 1)):
            raise AtlasError("merged region ids must form a contiguous 1..R range")
        self._merged = None

    @property
    def region_ids(self) -> List[int]:
        return sorted(set(self.merge_map.values()))

    @property
    def merged_labels(self) -> np.ndarray:
        """Label field with merged region ids (0 outside the brain)."""
        if self._merged is None:
            lut = np.zeros(int(self.labels.data.max()) + 1, dtype=np.int32)
            for fine, merged in self.merge_map.items():
                lut[fine] = merged
            self._merged = lut[self.labels.data]
        return self._merged

    def brain_mask(self) -> Volume:
        return self.labels.with_data(self.labels.data > 0)

    def region_mask(self, region_ids: Sequence[int]) -> Volume:
        return self.labels.with_data(np.isin(self.merged_labels, list(region_ids)))

    def region_voxel_counts(self) -> Dict[int, int]:
        counts = np.bincount(self.merged_labels.ravel(), minlength=len(self.region_ids) + 1)
        return {r: int(counts[r]) for r in self.region_ids}


def _grid_coordinates(dims, spacing):
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _band_sizes(region_count: int) -> Tuple[int, int, int]:
    n_core = max(1, int(round(region_count * 5 / 23)))
    n_outer = region_count - n_core
    n_sup = int(math.ceil(n_outer / 2))
    return n_sup, n_outer - n_sup, n_core


@lru_cache(maxsize=8)
def _atlas_fields(dims: Tuple[int, int, int], spacing: Tuple[float, float, float], region_count: int):
    X, Y, Z = _grid_coordinates(dims, spacing)
    half = [n * s / 2.0 for n, s in zip(dims, spacing)]
    a, b, c = (f * h for f, h in zip(_SEMI_AXES, half))
    r = np.sqrt((X / a) ** 2 + (Y / b) ** 2 + (Z / c) ** 2)
    # azimuth around the vertical axis, 0 = anterior (+y), increasing toward +x
    phi = np.mod(np.arctan2(X, Y), 2 * np.pi)
    n_sup, n_inf, n_core = _band_sizes(region_count)
    merged = np.zeros(dims, dtype=np.int32)
    brain = r <= 1.0
    core = brain & (r <= _CORE_RADIUS)
    shell = brain & ~core
    sup = shell & (Z > 0)
    inf = shell & (Z <= 0)
    offset = 0
    for sel, n in ((sup, n_sup), (inf, n_inf), (core, n_core)):
        sector = np.minimum((phi / (2 * np.pi) * n).astype(np.int32), n - 1)
        merged[sel] = offset + 1 + sector[sel]
        offset += n
    return merged, r, X


def synthetic_atlas(
    dims: Sequence[int],
    region_count: int = 23,
    spacing: Sequence[float] = (2.0, 2.0, 2.0),
    subtype_regions: Optional[Dict[str, List[int]]] = None,
) -> Atlas:
    """Partition an ellipsoidal brain into ``region_count`` contiguous regions.

    Each region is split into left/right fine labels; the merge map folds them
    back. Raises if any region ends up empty on this grid.
    """
    if region_count < 6:
        raise AtlasError("region_count must be >= 6 to host the six subtype masks")
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    merged, _, X = _atlas_fields(dims, spacing, region_count)
    names = _region_names(region_count)
    labels = np.zeros(dims, dtype=np.uint16)
    label_table, merge_map = {}, {}
    next_label = 1
    for region in range(1, region_count + 1):
        in_region = merged == region
        if not in_region.any():
            raise AtlasError(
                f"region_count {region_count} exceeds the sectors constructible on a {dims} grid"
            )
        for side, sel in (("L", X < 0), ("R", X >= 0)):
            part = in_region & sel
            if part.any():
                labels[part] = next_label
                label_table[next_label] = f"{names[region]}_{side}"
                merge_map[next_label] = region
                next_label += 1
    if subtype_regions is None:
        subtype_regions = default_subtype_regions(region_count)
    return Atlas(
        labels=Volume(labels, spacing),
        label_table=label_table,
        merge_map=merge_map,
        region_names=names,
        subtype_regions={k: list(v) for k, v in subtype_regions.items()},
    )


def _region_names(region_count: int) -> Dict[int, str]:
    if region_count == len(REGION_NAMES_23):
        return {i + 1: n for i, n in enumerate(REGION_NAMES_23)}
    n_sup, n_inf, n_core = _band_sizes(region_count)
    names = {}
    for prefix, start, n in (("superior", 0, n_sup), ("inferior", n_sup, n_inf),
                             ("core", n_sup + n_inf, n_core)):
        for k in range(n):
            names[start + k + 1] = f"{prefix}_{k + 1:02d}"
    return names


def default_subtype_regions(region_count: int) -> Dict[str, List[int]]:
    """Subtype -> merged region ids.

    The 23-region layout uses anatomical analogs; other counts get a generic
    spread over the cortical sectors (PCA and svPPA stay disjoint).
    """
    if region_count == len(REGION_NAMES_23):
        index = {n: i + 1 for i, n in enumerate(REGION_NAMES_23)}
        return {k: [index[n] for n in v] for k, v in DEFAULT_SUBTYPE_REGIONS_23.items()}
    n_sup, n_inf, _ = _band_sizes(region_count)
    outer = list(range(1, n_sup + n_inf + 1))
    groups = {k: [r for r in outer if (r - 1) % 5 == i] for i, k in enumerate(SUBTYPES[1:])}
    groups = {k: v or [outer[i % len(outer)]] for i, (k, v) in enumerate(groups.items())}
    ad = sorted(set(groups["lvPPA"]) | set(groups["svPPA"]))
    return {"AD": ad, **groups}


def save_atlas(atlas: Atlas, directory: PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(atlas.labels, d / "atlas")
    (d / "label_table.json").write_text(
        json.dumps({str(k): v for k, v in sorted(atlas.label_table.items())}, indent=1) + "\n"
    )
    (d / "merge_map.json").write_text(
        json.dumps(
            {
                "merge_map": {str(k): v for k, v in sorted(atlas.merge_map.items())},
                "region_names": {str(k): v for k, v in sorted(atlas.region_names.items())},
            },
            indent=1,
        )
        + "\n"
    )
    (d / "subtypes.json").write_text(json.dumps(atlas.subtype_regions, indent=1) + "\n")
    return d


def load_atlas(directory: PathLike) -> Atlas:
    """Load an atlas directory. Any u16 label volume with matching tables works."""
    d = Path(directory)
    labels = load_volume(d / "atlas")
    if labels.data.dtype != np.uint16:
        labels = labels.with_data(labels.data.astype(np.uint16))
    label_table = {int(k): v for k, v in json.loads((d / "label_table.json").read_text()).items()}
    mm = json.loads((d / "merge_map.json").read_text())
    merge_map = {int(k): int(v) for k, v in mm["merge_map"].items()}
    names = {int(k): v for k, v in mm.get("region_names", {}).items()}
    for r in set(merge_map.values()) - set(names):
        names[r] = f"region_{r:02d}"
    subtypes = {}
    if (d / "subtypes.json").exists():
        subtypes = {k: [int(r) for r in v] for k, v in json.loads((d / "subtypes.json").read_text()).items()}
    atlas = Atlas(labels, label_table, merge_map, names, subtypes)
    empty = [r for r, n in atlas.region_voxel_counts().items() if n == 0]
    if empty:
        raise AtlasError(f"regions with zero voxels: {empty}")
    return atlas


def outside_brain_mask(atlas: Atlas, margin_mm: float = 8.0) -> Volume:
    """Voxels farther than ``margin_mm`` from the brain."""
    brain = atlas.labels.data > 0
    dist = ndimage.distance_transform_edt(~brain, sampling=atlas.labels.spacing)
    return atlas.labels.with_data(dist > margin_mm)


# ------------------------------------------------------------------- phantoms


@dataclass
class PhantomParams:
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing_mm: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    global_seed: int = 0
    n_subjects: int = 10
    sessions_per_subject: int = 2
    subject_variability_sigma: float = 0.2
    session_noise_sigma: float = 0.01
    region_count: int = 23
    # scanner resolution applied to the anatomy (8 mm FWHM)
    pet_fwhm_mm: float = 8.0
    field_sigma_mm: float = 20.0
    # subject fields mix this many fixed population modes; 0 = free random field
    subject_modes: int = 8

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.n_subjects < 1 or self.sessions_per_subject < 1:
            raise ValueError("n_subjects and sessions_per_subject must be positive")
        if self.global_seed < 0:
            raise ValueError("global_seed must be non-negative")
        if min(self.subject_variability_sigma, self.session_noise_sigma) < 0:
            raise ValueError("sigmas must be >= 0")
        if self.subject_modes < 0:
            raise ValueError("subject_modes must be >= 0")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError(f"dims must be three integers >= 4, got {self.dims}")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims)
        out["spacing_mm"] = list(self.spacing_mm)
        return out


def _region_modulation(region_count: int) -> np.ndarray:
    # fixed population anatomy, independent of the cohort seed
    mod = np.random.default_rng(1000 + region_count).uniform(0.92, 1.08, region_count + 1)
    mod[0] = 1.0
    if region_count == len(REGION_NAMES_23):
        mod[REGION_NAMES_23.index("temporal_pole") + 1] = 0.85
    return mod


@lru_cache(maxsize=8)
def _healthy_template(dims, spacing, region_count, pet_fwhm_mm):
    merged, r, _ = _atlas_fields(dims, spacing, region_count)
    core = (r <= _CORE_RADIUS) & (r <= 1.0)
    base = np.where(merged > 0, SHELL_UPTAKE, 0.0)
    base[core] = DEEP_UPTAKE
    base = base * _region_modulation(region_count)[merged]
    sigma = pet_fwhm_mm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    template = gaussian_smooth(Volume(base, spacing), sigma).data
    envelope = gaussian_smooth(Volume((merged > 0).astype(np.float64), spacing), sigma).data
    template.flags.writeable = False
    envelope.flags.writeable = False
    return template, envelope


def _unit_field(rng: np.random.Generator, dims, spacing, sigma_mm: float) -> np.ndarray:
    smooth = gaussian_smooth(Volume(rng.standard_normal(dims), spacing), sigma_mm).data
    return smooth / smooth.std()


@lru_cache(maxsize=4)
def _population_modes(dims, spacing, sigma_mm: float, n_modes: int) -> np.ndarray:
    # like the regional modulation, the modes are population anatomy: cohort seed independent
    modes = np.stack([_unit_field(np.random.default_rng([4, k]), dims, spacing, sigma_mm)
                      for k in range(n_modes)])
    modes.flags.writeable = False
    return modes


def _subject_field(params: PhantomParams, subject: int) -> np.ndarray:
    if params.subject_variability_sigma == 0:
        return np.zeros(params.dims)
    rng = np.random.default_rng([params.global_seed, 1, subject])
    if params.subject_modes == 0:
        field = _unit_field(rng, params.dims, params.spacing_mm, params.field_sigma_mm)
    else:
        modes = _population_modes(params.dims, params.spacing_mm, params.field_sigma_mm, params.subject_modes)
        coef = rng.standard_normal(params.subject_modes) / math.sqrt(params.subject_modes)
        field = np.tensordot(coef, modes, axes=1)
    return params.subject_variability_sigma * field


def generate_phantom(params: PhantomParams, subject: int, session: int) -> Volume:
    """Healthy phantom image for ``(subject, session)``, rounded to float32.

    The subject field depends only on (global_seed, subject); the session noise
    on (global_seed, subject, session).
    """
    if not 0 <= subject < params.n_subjects:
        raise ValueError(f"subject index {subject} outside [0, {params.n_subjects})")
    if not 0 <= session < params.sessions_per_subject:
        raise ValueError(f"session index {session} outside [0, {params.sessions_per_subject})")
    template, envelope = _healthy_template(
        params.dims, params.spacing_mm, params.region_count, params.pet_fwhm_mm
    )
    img = template * (1.0 + _subject_field(params, subject))
    if params.session_noise_sigma > 0:
        rng = np.random.default_rng([params.global_seed, 2, subject, session])
        img = img + params.session_noise_sigma * envelope * rng.standard_normal(params.dims)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Volume(img, params.spacing_mm)


# --------------------------------------------------------------------- cohorts


def subject_id(index: int) -> str:
    return f"sub-{index:04d}"


def session_id(index: int) -> str:
    return f"ses-M{12 * index:03d}"


@dataclass
class CohortRecord:
    subject_id: str
    session_id: str
    age: float
    sex: str
    diagnosis: str
    volume_path: str

    @property
    def image_id(self) -> str:
        return f"{self.subject_id}_{self.session_id}"


@dataclass
class CohortManifest:
    records: List[CohortRecord]
    root: Path = Path(".")

    def __post_init__(self):
        keys = [(r.subject_id, r.session_id) for r in self.records]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (subject_id, session_id) pairs in manifest")
        if any(r.age <= 0 for r in self.records):
            raise ValueError("ages must be positive")

    def __len__(self):
        return len(self.records)

    @property
    def subjects(self) -> List[str]:
        return sorted({r.subject_id for r in self.records})

    def resolve(self, record: CohortRecord) -> Path:
        p = Path(record.volume_path)
        return p if p.is_absolute() else self.root / p

    def load(self, record: CohortRecord) -> Volume:
        return load_volume(self.resolve(record))

    def subset(self, records: Sequence[CohortRecord]) -> "CohortManifest":
        return CohortManifest(list(records), self.root)

    def write(self, path: PathLike) -> Path:
        path = Path(path)
        lines = []
        for r in self.records:
            rec = asdict(r)
            rec["volume_path"] = os.path.relpath(self.resolve(r).resolve(), path.parent.resolve())
            lines.append(json.dumps(rec))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path: PathLike) -> "CohortManifest":
        path = Path(path)
        records = [
            CohortRecord(**json.loads(line))
            for line in path.read_text().splitlines()
            if line.strip()
        ]
        manifest = cls(records, path.parent)
        for r in records:
            p = manifest.resolve(r)
            if not (p.exists() or Path(str(p) + ".vol1.json").exists()):
                raise FileNotFoundError(f"volume for {r.image_id} not found at {p}")
        return manifest


def cohort_covariates(params: PhantomParams) -> List[Tuple[float, str]]:
    rng = np.random.default_rng([params.global_seed, 3])
    sexes = rng.random(params.n_subjects) < 0.5
    ages = np.clip(rng.normal(73.0, 6.0, params.n_subjects), 55.0, 92.0)
    return [(round(float(a), 1), "F" if s else "M") for a, s in zip(ages, sexes)]


def generate_cohort(params: PhantomParams, out_dir: PathLike) -> CohortManifest:
    """Write every phantom of the cohort plus ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    records = []
    for s, (age, sex) in enumerate(cohort_covariates(params)):
        for t in range(params.sessions_per_subject):
            sid, ses = subject_id(s), session_id(t)
            stem = out / "volumes" / f"{sid}_{ses}"
            save_volume(generate_phantom(params, s, t), stem)
            records.append(CohortRecord(sid, ses, age, sex, "CN", f"volumes/{sid}_{ses}"))
    manifest = CohortManifest(records, out)
    manifest.write(out / "manifest.jsonl")
    return manifest
