"""Latent-space analyses: PCA maps, Minkowski distances, subject structure."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats as sps
from scipy.sparse.csgraph import minimum_spanning_tree, shortest_path
from scipy.spatial.distance import pdist, squareform

from .metrics import MetricConfig, mse, ssim
from .stats import DegenerateSampleError, TestResult, mann_whitney_u
from .volume import PathLike, Volume


# ------------------------------------------------------------------------ PCA


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray
    total_variance: float = 0.0

    @property
    def explained_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "total_variance": self.total_variance,
        }


def _as_matrix(latents) -> np.ndarray:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("latents must be a list of equal-length vectors")
    return z


def pca_fit(latents, k: int = 2) -> PcaModel:
    """Top-``k`` principal axes by SVD of the centered data.

    Each component is flipped so that its largest-magnitude coordinate is
    positive, which makes the result independent of the LAPACK sign choice.
    """
    z = _as_matrix(latents)
    n, d = z.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 vectors")
    if k < 1 or k > min(n, d):
        raise ValueError(f"cannot extract {k} components from {n} samples of dimension {d}")
    mean = z.mean(axis=0)
    _, s, vt = np.linalg.svd(z - mean, full_matrices=False)
    comps = vt[:k].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = s**2 / (n - 1)
    return PcaModel(mean, comps, var[:k].copy(), float(var.sum()))


def pca_project(model: PcaModel, v) -> np.ndarray:
    """Coordinates of one vector (or rows of a matrix) in the component basis."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.mean.size:
        raise ValueError(f"vector length {v.shape[-1]} does not match model dimension {model.mean.size}")
    return (v - model.mean) @ model.components.T


def pca_reconstruction_error(model: PcaModel, latents, k: Optional[int] = None) -> float:
    """Mean squared residual after projecting onto the first ``k`` components."""
    z = _as_matrix(latents)
    c = model.components[: (k if k is not None else len(model.components))]
    centered = z - model.mean
    resid = centered - (centered @ c.T) @ c
    return float(np.mean(resid**2))


# ------------------------------------------------------------------ distances


def minkowski(z1, z2, p: float = 10.0) -> float:
    """(sum |z1 - z2|^p)^(1/p), scaled by the largest difference to avoid overflow."""
    a = np.asarray(z1, dtype=np.float64)
    b = np.asarray(z2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if not p >= 1:
        raise ValueError("p must be >= 1")
    d = np.abs(a - b)
    m = d.max() if d.size else 0.0
    if m == 0.0:
        return 0.0
    if np.isinf(p):
        return float(m)
    return float(m * np.sum((d / m) ** p) ** (1.0 / p))


def pairwise_minkowski(latents, p: float = 10.0) -> np.ndarray:
    """Symmetric matrix of Minkowski distances between rows."""
    z = _as_matrix(latents)
    n = z.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        d = np.abs(z[i + 1 :] - z[i])
        m = d.max(axis=1, initial=0.0)
        safe = np.where(m > 0, m, 1.0)
        vals = m * np.sum((d / safe[:, None]) ** p, axis=1) ** (1.0 / p)
        out[i, i + 1 :] = vals
        out[i + 1 :, i] = vals
    return out


# ------------------------------------------------------ intra / inter subject


@dataclass
class IntraInterResult:
    intra: np.ndarray
    inter: np.ndarray
    test: Optional[TestResult]
    image_ids: List[str] = field(default_factory=list)
    degenerate: bool = False
    note: str = ""

    def summary(self) -> dict:
        return {
            "n_images": int(self.intra.size),
            "intra_mean": float(self.intra.mean()),
            "inter_mean": float(self.inter.mean()),
            "intra_median": float(np.median(self.intra)),
            "inter_median": float(np.median(self.inter)),
            "statistic": None if self.test is None else self.test.statistic,
            "p_value": None if self.test is None else self.test.p_value,
            "method": "mann_whitney",
            "degenerate": self.degenerate,
            "note": self.note,
        }


def intra_inter_study(
    latents,
    subject_ids: Sequence[str],
    p: float = 10.0,
    n_neighbors: int = 5,
    image_ids: Optional[Sequence[str]] = None,
) -> IntraInterResult:
    """Per image: mean distance to the subject's other images (intra) and mean
    distance to the ``n_neighbors`` closest images of other subjects (inter)."""
    z = _as_matrix(latents)
    subjects = np.asarray(list(subject_ids))
    if len(subjects) != z.shape[0]:
        raise ValueError("one subject id per latent vector is required")
    uniq, counts = np.unique(subjects, return_counts=True)
    if uniq.size < 2 or np.sum(counts >= 2) < 2:
        raise ValueError("insufficient sessions: need >= 2 subjects with >= 2 images each")
    dist = pairwise_minkowski(z, p)
    intra, inter, kept = [], [], []
    for i in range(z.shape[0]):
        same = subjects == subjects[i]
        same_other = same.copy()
        same_other[i] = False
        if not same_other.any():
            continue
        others = dist[i, ~same]
        if others.size < n_neighbors:
            raise ValueError(f"fewer than {n_neighbors} images from other subjects")
        intra.append(dist[i, same_other].mean())
        inter.append(np.sort(others)[:n_neighbors].mean())
        kept.append(i)
    intra, inter = np.array(intra), np.array(inter)
    ids = [image_ids[i] for i in kept] if image_ids is not None else [str(i) for i in kept]
    if np.all(intra == intra[0]) and np.all(inter == intra[0]):
        return IntraInterResult(intra, inter, None, ids, True, "all distances equal; test undefined")
    try:
        test = mann_whitney_u(intra, inter)
    except DegenerateSampleError as exc:
        return IntraInterResult(intra, inter, None, ids, True, str(exc))
    return IntraInterResult(intra, inter, test, ids, test.degenerate)


# ------------------------------------------------------- neighbor distances


def default_ranks() -> List[int]:
    return list(range(1, 47, 5))


@dataclass
class NeighborPoint:
    image_id: str
    rank: int
    neighbor_id: str
    latent_distance: float
    mse: float
    ssim: float


def neighbor_image_distance_curves(
    latents,
    volumes: Sequence[Volume],
    subject_ids: Sequence[str],
    ranks: Sequence[int] = None,
    p: float = 10.0,
    image_ids: Optional[Sequence[str]] = None,
    metric_cfg: Optional[MetricConfig] = None,
) -> List[NeighborPoint]:
    """For every image, its rank-j nearest other-subject neighbor in latent space,
    with the latent distance and the image-space MSE and SSIM to that neighbor."""
    z = _as_matrix(latents)
    n = z.shape[0]
    if len(volumes) != n or len(subject_ids) != n:
        raise ValueError("latents, volumes and subject ids must be aligned")
    ranks = sorted(default_ranks() if ranks is None else ranks)
    if ranks[0] < 1:
        raise ValueError("ranks start at 1")
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(n)]
    subjects = np.asarray(list(subject_ids))
    dist = pairwise_minkowski(z, p)
    out = []
    for i in range(n):
        cand = np.flatnonzero(subjects != subjects[i])
        if ranks[-1] > cand.size:
            raise ValueError(f"rank {ranks[-1]} exceeds the {cand.size} images of other subjects")
        # stable sort: ties resolved by image order
        order = cand[np.argsort(dist[i, cand], kind="stable")]
        for r in ranks:
            j = order[r - 1]
            out.append(NeighborPoint(ids[i], r, ids[j], float(dist[i, j]),
                                     mse(volumes[i], volumes[j]), ssim(volumes[i], volumes[j], metric_cfg)))
    return out


def curves_by_image(points: Sequence[NeighborPoint], y: str = "mse") -> Dict[str, List[tuple]]:
    """Group curve points as image_id -> [(latent_distance, y), ...] in rank order."""
    groups: Dict[str, List[tuple]] = {}
    for pt in points:
        groups.setdefault(pt.image_id, []).append((pt.latent_distance, getattr(pt, y)))
    return groups


# -------------------------------------------------------------- severity path


def trajectory_positions(points) -> np.ndarray:
    """Arc-length position of each point along the path the points trace.

    The path is the minimum spanning tree of the points; positions are tree
    distances from one end of its longest path. No ordering labels are used,
    so a curved but ordered trajectory keeps its order.
    """
    pts = np.asarray(points, dtype=np.float64)
    tree = minimum_spanning_tree(squareform(pdist(pts)))
    geo = shortest_path(tree, directed=False)
    start = np.unravel_index(np.argmax(geo), geo.shape)[0]
    return geo[start]


def severity_order_correlation(points, severities: Sequence[float]) -> float:
    """|Spearman rho| between severity and arc-length position along the trajectory.

    ``points`` are 2D (or kD) projections of one subject at several severities.
    """
    pts = np.asarray(points, dtype=np.float64)
    sev = np.asarray(severities, dtype=np.float64)
    if pts.shape[0] != sev.size or sev.size < 3:
        raise ValueError("need >= 3 points aligned with severities")
    rho = sps.spearmanr(sev, trajectory_positions(pts)).statistic
    return float(abs(rho)) if np.isfinite(rho) else 0.0


def write_json(obj, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path
