"""Experiment orchestration.

Every stage reads and writes a fixed layout under one output directory, so a
stage can run on its own (one CLI subcommand each) or chained by
``run_experiment``. Stage outcomes go to ``status.json``; a failing stage is
recorded and everything downstream of it is marked as skipped, while earlier
artifacts stay on disk.

Layout::

    atlas/  cohort/  qc.csv  split.json
    folds/fold<k>/{model.phv,loss_trace.csv,validation_metrics.csv}
    fold_selection.json  simulated/
    results/...  latent/...  status.json  manifest_index.json
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..genmodel import (
    IdentityModel,
    Reconstructor,
    TrainingDiverged,
    VaeModel,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_trace,
)
from ..latent import (
    curves_by_image,
    intra_inter_study,
    neighbor_image_distance_curves,
    pca_fit,
    pca_project,
    severity_order_correlation,
)
from ..lmm import lmm_fit, write_lmm_csv
from ..metrics import healthiness, image_metrics, ssim
from ..phantom import (
    Atlas,
    CohortManifest,
    CohortRecord,
    generate_cohort,
    load_atlas,
    outside_brain_mask,
    save_atlas,
    synthetic_atlas,
)
from ..regional import dump_json, regional_anomaly_report, regional_summary, violin_data, write_regional_csv
from ..simulate import (
    SimulationSpec,
    build_subtype_mask,
    default_specs,
    materialize_test_sets,
    read_simulated_manifest,
    simulate_hypometabolism,
    smooth_mask,
)
from ..stats import DegenerateSampleError, welch_t_test
from ..volume import Volume
from .config import ANALYSES, ExperimentConfig, save_config
from .qc import qc_overlap, write_qc_csv
from .split import CohortSplit, read_split, split_cohort, write_split

log = logging.getLogger(__name__)

STAGES = ("data", "qc", "split", "train", "simulate") + ANALYSES
# stage -> stages whose artifacts it reads
DEPENDS = {
    "data": (),
    "qc": ("data",),
    "split": ("qc",),
    "train": ("split",),
    "simulate": ("split",),
    "reconstruction": ("train",),
    "severity": ("train", "simulate"),
    "subtypes": ("train", "simulate"),
    "healthiness": ("train", "simulate"),
    "regional": ("train", "simulate"),
    "latent": ("train",),
}
METRIC_NAMES = ("mse", "psnr", "ssim", "ms_ssim")


class StageError(RuntimeError):
    """A stage could not produce its artifacts."""


class Skip(Exception):
    """Raised inside a stage that has nothing to do; the reason is recorded."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path: Path) -> List[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _summary_rows(groups: Dict[str, Dict[str, List[float]]]) -> List[list]:
    rows = []
    for name, metrics in groups.items():
        for m, values in metrics.items():
            a = np.asarray(values, dtype=np.float64)
            finite = a[np.isfinite(a)]
            rows.append([name, m, a.size, float(finite.mean()) if finite.size else float("nan"),
                         float(finite.std(ddof=1)) if finite.size > 1 else float("nan")])
    return rows


# ------------------------------------------------------------------ workspace


@dataclass
class Workspace:
    """Output directory plus lazily loaded shared inputs."""

    cfg: ExperimentConfig
    root: Path
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    # paths
    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def atlas_dir(self) -> Path:
        return Path(self.cfg.atlas_path) if self.cfg.atlas_path else self.path("atlas")

    @property
    def cohort_manifest(self) -> Path:
        return Path(self.cfg.cohort_path) if self.cfg.cohort_path else self.path("cohort", "manifest.jsonl")

    def fold_dir(self, k: int) -> Path:
        return self.path("folds", f"fold{k}")

    # shared inputs
    def _get(self, key, loader):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    @property
    def atlas(self) -> Atlas:
        return self._get("atlas", lambda: load_atlas(self.atlas_dir))

    @property
    def manifest(self) -> CohortManifest:
        return self._get("manifest", lambda: CohortManifest.read(self.cohort_manifest))

    @property
    def qc_passed(self) -> CohortManifest:
        def load():
            path = self.path("qc.csv")
            if not path.exists():
                return self.manifest
            ok = {r["image_id"] for r in read_csv(path) if r["passed"] == "true"}
            return self.manifest.subset([r for r in self.manifest.records if r.image_id in ok])
        return self._get("qc_passed", load)

    @property
    def split(self) -> CohortSplit:
        return self._get("split", lambda: read_split(self.path("split.json"), self.qc_passed))

    def volume(self, record: CohortRecord) -> Volume:
        cache = self._cache.setdefault("volumes", {})
        if record.image_id not in cache:
            cache[record.image_id] = self.manifest.load(record)
        return cache[record.image_id]

    def volumes(self, records: Sequence[CohortRecord]) -> List[Volume]:
        return [self.volume(r) for r in records]

    @property
    def test_records(self) -> List[CohortRecord]:
        return self.split.test

    @property
    def test_volumes(self) -> List[Volume]:
        return self.volumes(self.test_records)

    @property
    def model(self) -> Reconstructor:
        return self._get("model", self._load_model)

    def _load_model(self) -> Reconstructor:
        path = self.path("fold_selection.json")
        if not path.exists():
            raise StageError("no trained model: run the train stage first")
        sel = json.loads(path.read_text())
        if sel["model"] == "identity":
            return IdentityModel()
        return VaeModel(load_checkpoint(self.root / sel["checkpoint"]))

    def recon(self, key: str, volumes: Callable[[], List[Volume]]) -> List[Volume]:
        """Reconstructions of a named image list, computed once per workspace."""
        cache = self._cache.setdefault("recon", {})
        if key not in cache:
            cache[key] = self.model.reconstruct_many(volumes())
        return cache[key]

    @property
    def test_recon(self) -> List[Volume]:
        return self.recon("test", lambda: self.test_volumes)

    # simulated sets
    def specs(self) -> List[SimulationSpec]:
        s = self.cfg.simulation
        return default_specs(s.severities, s.subtypes, s.smoothing_sigma_mm, s.subtype_severity)

    def weight_mask(self, subtype: str) -> Volume:
        cache = self._cache.setdefault("weights", {})
        if subtype not in cache:
            cache[subtype] = smooth_mask(build_subtype_mask(self.atlas, subtype),
                                         self.cfg.simulation.smoothing_sigma_mm)
        return cache[subtype]

    def simulated(self, subtype: str, severity: float) -> List[Volume]:
        """Simulated copies of the test set, from disk when materialized."""
        spec = SimulationSpec(subtype, severity, self.cfg.simulation.smoothing_sigma_mm)
        cache = self._cache.setdefault("simulated", {})
        if spec.set_name in cache:
            return cache[spec.set_name]
        from ..volume import load_volume

        index = self._get("sim_index", self._sim_index)
        entries = index.get(spec.set_name)
        if entries is not None and all(r.image_id in entries for r in self.test_records):
            vols = [load_volume(entries[r.image_id]) for r in self.test_records]
        else:
            w = self.weight_mask(subtype)
            vols = [simulate_hypometabolism(x, w, severity) for x in self.test_volumes]
        cache[spec.set_name] = vols
        return vols

    def _sim_index(self) -> Dict[str, Dict[str, str]]:
        path = self.path("simulated", "simulated.jsonl")
        if not path.exists():
            return {}
        out: Dict[str, Dict[str, str]] = {}
        for e in read_simulated_manifest(path):
            out.setdefault(e.set_name, {})[e.image_id] = e.simulated_path
        return out

    def simulated_recon(self, subtype: str, severity: float) -> List[Volume]:
        name = SimulationSpec(subtype, severity).set_name
        return self.recon(f"sim:{name}", lambda: self.simulated(subtype, severity))


# --------------------------------------------------------------------- stages


def stage_data(ws: Workspace) -> List[Path]:
    """Load or synthesize the atlas and the phantom cohort."""
    cfg, out = ws.cfg, []
    if cfg.atlas_path is None:
        p = cfg.phantom
        atlas = synthetic_atlas(p.dims, p.region_count, p.spacing_mm)
        out.append(save_atlas(atlas, ws.atlas_dir))
    elif not Path(cfg.atlas_path).exists():
        raise StageError(f"atlas not found: {cfg.atlas_path}")
    if cfg.cohort_path is None:
        manifest = generate_cohort(cfg.phantom, ws.path("cohort"))
        out.append(ws.cohort_manifest)
        ws._cache["manifest"] = manifest
    elif not Path(cfg.cohort_path).exists():
        raise StageError(f"cohort manifest not found: {cfg.cohort_path}")
    return out


def stage_qc(ws: Workspace) -> List[Path]:
    mask = outside_brain_mask(ws.atlas, ws.cfg.qc_margin_mm)
    results = [
        qc_overlap(ws.volume(r), mask, ws.cfg.qc_threshold, r.image_id) for r in ws.manifest.records
    ]
    ws._cache.pop("qc_passed", None)
    failed = [r.image_id for r in results if not r.passed]
    if failed:
        log.info("qc: %d of %d images rejected", len(failed), len(results))
    return [write_qc_csv(results, ws.path("qc.csv"))]


def stage_split(ws: Workspace) -> List[Path]:
    split = split_cohort(ws.qc_passed, ws.cfg.split)
    ws._cache["split"] = split
    return [write_split(split, ws.path("split.json"))]


def _metric_rows(ids, xs, ys, cfg) -> List[list]:
    rows = []
    for i, x, y in zip(ids, xs, ys):
        m = image_metrics(x, y, cfg)
        rows.append([i, m.mse, m.psnr, m.ssim, m.ms_ssim])
    return rows


def stage_train(ws: Workspace) -> List[Path]:
    """Train one model per requested fold, then pick the fold used downstream.

    The selected fold has the highest minimum validation SSIM, unless
    ``cfg.fold`` names one explicitly.
    """
    cfg, split, out = ws.cfg, ws.split, []
    if cfg.model == "identity":
        sel = {"model": "identity", "fold": None, "checkpoint": None, "rule": "identity baseline",
               "folds": {}}
        out.append(dump_json(sel, ws.path("fold_selection.json")))
        ws._cache.pop("model", None)
        return out
    arch = cfg.arch()
    min_ssim: Dict[int, Optional[float]] = {}
    errors: Dict[int, str] = {}
    for k in cfg.folds_to_train():
        d = ws.fold_dir(k)
        d.mkdir(parents=True, exist_ok=True)
        val = split.val_folds[k]
        log.info("fold %d: training on %d images", k, len(split.train_folds[k]))
        try:
            res = train(ws.volumes(split.train_folds[k]), cfg.train, arch, ws.volumes(val))
        except TrainingDiverged as exc:
            errors[k] = str(exc)
            out.append(write_loss_trace(exc.trace, d / "loss_trace.csv"))
            continue
        out.append(write_loss_trace(res.trace, d / "loss_trace.csv"))
        out.append(save_checkpoint(res.params, d / "model.phv", {"fold": k, "train": cfg.train.to_dict()}))
        model = VaeModel(res.params)
        vals = ws.volumes(val)
        rows = _metric_rows([r.image_id for r in val], vals, model.reconstruct_many(vals), cfg.metrics)
        out.append(write_csv(d / "validation_metrics.csv", ("image_id",) + METRIC_NAMES, rows))
        min_ssim[k] = min(r[3] for r in rows) if rows else None
    trained = {k: v for k, v in min_ssim.items() if v is not None}
    if not trained:
        raise StageError("no fold trained successfully: " + "; ".join(f"fold {k}: {e}" for k, e in errors.items()))
    if cfg.fold is not None:
        if cfg.fold not in trained:
            raise StageError(f"requested fold {cfg.fold} has no trained model")
        chosen, rule = cfg.fold, "override"
    else:
        chosen = max(sorted(trained), key=lambda k: trained[k])
        rule = "highest minimum validation SSIM"
    sel = {
        "model": "vae",
        "fold": chosen,
        "checkpoint": str(Path("folds", f"fold{chosen}", "model.phv")),
        "rule": rule,
        "folds": {str(k): {"min_val_ssim": min_ssim.get(k), "error": errors.get(k, "")}
                  for k in cfg.folds_to_train()},
    }
    out.append(write_csv(ws.path("validation_summary.csv"), ("fold", "min_val_ssim", "error"),
                         [[k, min_ssim.get(k), errors.get(k, "")] for k in cfg.folds_to_train()]))
    out.append(dump_json(sel, ws.path("fold_selection.json")))
    ws._cache.pop("model", None)
    return out


def stage_simulate(ws: Workspace) -> List[Path]:
    s = ws.cfg.simulation
    materialize_test_sets(ws.qc_passed, ws.atlas, s.severities, s.subtypes, ws.path("simulated"),
                          s.smoothing_sigma_mm, s.subtype_severity, records=ws.test_records)
    ws._cache.pop("sim_index", None)
    ws._cache.pop("simulated", None)
    return [ws.path("simulated", "simulated.jsonl")]


def stage_reconstruction(ws: Workspace) -> List[Path]:
    """Healthy test images against their reconstructions."""
    ids = [r.image_id for r in ws.test_records]
    rows = _metric_rows(ids, ws.test_volumes, ws.test_recon, ws.cfg.metrics)
    cols = ("image_id",) + METRIC_NAMES
    summary = _summary_rows({"test_cn": {m: [r[i + 1] for r in rows] for i, m in enumerate(METRIC_NAMES)}})
    return [
        write_csv(ws.path("results", "reconstruction_metrics.csv"), cols, rows),
        write_csv(ws.path("results", "reconstruction_summary.csv"), ("set", "metric", "n", "mean", "std"), summary),
    ]


def stage_severity(ws: Workspace) -> List[Path]:
    """MSE(x, x^') and MSE(x', x^') across AD severities, with Welch tests."""
    from ..metrics import mse

    xs, xh = ws.test_volumes, ws.test_recon
    ids = [r.image_id for r in ws.test_records]
    healthy = np.array([mse(a, b) for a, b in zip(xs, xh)])
    base = float(healthy.mean())
    severities = sorted(ws.cfg.simulation.severities)
    k = len(severities)
    per_image, tests = [], []
    for f in severities:
        xp, xph = ws.simulated("AD", f), ws.simulated_recon("AD", f)
        a = np.array([mse(x, y) for x, y in zip(xs, xph)])
        b = np.array([mse(x, y) for x, y in zip(xp, xph)])
        for i, h, ai, bi in zip(ids, healthy, a, b):
            per_image.append([f, i, h, ai, bi])
        note = ""
        try:
            t = welch_t_test(a, b).adjusted(k)
        except DegenerateSampleError as exc:
            t, note = None, str(exc)
        tests.append([
            f, a.size, base, float(a.mean()), float(b.mean()),
            float(a.mean()) / base if base > 0 else float("nan"),
            t.statistic if t else None, t.df if t else None, t.p_value if t else None,
            t.p_adjusted if t else None, (t.p_adjusted < 0.05) if t else None, note,
        ])
    return [
        write_csv(ws.path("results", "severity_mse.csv"),
                  ("severity", "image_id", "mse_x_xhat", "mse_x_xhatp", "mse_xp_xhatp"), per_image),
        write_csv(ws.path("results", "severity_tests.csv"),
                  ("severity", "n", "mean_mse_x_xhat", "mean_mse_x_xhatp", "mean_mse_xp_xhatp",
                   "ratio_to_healthy", "welch_t", "df", "p", "p_adjusted", "significant", "note"), tests),
    ]


def _subtype_sets(ws: Workspace) -> List[Tuple[str, float]]:
    s = ws.cfg.simulation
    return [("AD", s.subtype_severity)] + [(t, s.subtype_severity) for t in s.subtypes]


def stage_subtypes(ws: Workspace) -> List[Path]:
    """Per subtype: metrics between x and x^', plus subject specificity SSIM(x^, x^')."""
    cfg = ws.cfg
    ids = [r.image_id for r in ws.test_records]
    xs, xh = ws.test_volumes, ws.test_recon
    rows, groups = [], {}
    for subtype, f in _subtype_sets(ws):
        xp, xph = ws.simulated(subtype, f), ws.simulated_recon(subtype, f)
        g = groups.setdefault(subtype, {m: [] for m in METRIC_NAMES + ("ssim_xhat_xhatp", "ssim_x_xp")})
        for i, x, a, p, ph in zip(ids, xs, xh, xp, xph):
            m = image_metrics(x, ph, cfg.metrics)
            spec_hat, spec_in = ssim(a, ph, cfg.metrics), ssim(x, p, cfg.metrics)
            rows.append([subtype, f, i, m.mse, m.psnr, m.ssim, m.ms_ssim, spec_hat, spec_in])
            for key, v in zip(g, (m.mse, m.psnr, m.ssim, m.ms_ssim, spec_hat, spec_in)):
                g[key].append(v)
    return [
        write_csv(ws.path("results", "subtype_metrics.csv"),
                  ("subtype", "severity", "image_id") + METRIC_NAMES + ("ssim_xhat_xhatp", "ssim_x_xp"), rows),
        write_csv(ws.path("results", "subtype_summary.csv"), ("subtype", "metric", "n", "mean", "std"),
                  _summary_rows(groups)),
    ]


def stage_healthiness(ws: Workspace) -> List[Path]:
    """Healthiness of x, x', x^' (and x^) inside each set's binary subtype mask."""
    brain = ws.atlas.brain_mask()
    ids = [r.image_id for r in ws.test_records]
    sets = [("AD", f) for f in sorted(ws.cfg.simulation.severities)]
    sets += [(t, ws.cfg.simulation.subtype_severity) for t in ws.cfg.simulation.subtypes]
    rows, summary = [], []
    for subtype, f in sets:
        mask = build_subtype_mask(ws.atlas, subtype)
        h = {
            "x": [healthiness(v, mask, brain) for v in ws.test_volumes],
            "xp": [healthiness(v, mask, brain) for v in ws.simulated(subtype, f)],
            "xhatp": [healthiness(v, mask, brain) for v in ws.simulated_recon(subtype, f)],
            "xhat": [healthiness(v, mask, brain) for v in ws.test_recon],
        }
        for j, i in enumerate(ids):
            rows.append([subtype, f, i, h["x"][j], h["xp"][j], h["xhatp"][j], h["xhat"][j]])
        hx, hp, hr = (np.array(h[k]) for k in ("x", "xp", "xhatp"))
        summary.append([subtype, f, hx.size, hx.mean(), hp.mean(), hr.mean(), float(np.mean(hr > hp)),
                        float(abs(hr.mean() - hx.mean()))])
    return [
        write_csv(ws.path("results", "healthiness.csv"),
                  ("subtype", "severity", "image_id", "h_x", "h_xp", "h_xhatp", "h_xhat"), rows),
        write_csv(ws.path("results", "healthiness_summary.csv"),
                  ("subtype", "severity", "n", "mean_h_x", "mean_h_xp", "mean_h_xhatp", "frac_recovered",
                   "abs_gap_xhatp_x"), summary),
    ]


def stage_regional(ws: Workspace) -> List[Path]:
    """Region-wise input vs reconstruction tests, per subtype, at the regional severity."""
    s = ws.cfg.simulation
    atlas, out, summaries = ws.atlas, [], {}
    ws.path("regional").mkdir(exist_ok=True)
    for subtype in ["AD"] + list(s.subtypes):
        xp, xph = ws.simulated(subtype, s.regional_severity), ws.simulated_recon(subtype, s.regional_severity)
        rows = regional_anomaly_report(list(zip(xp, xph)), atlas, s.regional_test, reference=ws.test_volumes)
        name = SimulationSpec(subtype, s.regional_severity).set_name
        out.append(write_regional_csv(rows, ws.path("regional", f"{name}.csv")))
        summaries[name] = regional_summary(rows, atlas.subtype_regions.get(subtype))
        groups = {"x": ws.test_volumes, "x_sim": xp, "recon": xph}
        out.append(dump_json(violin_data(groups, atlas), ws.path("regional", f"{name}_violin.json")))
    out.append(dump_json(summaries, ws.path("regional", "summary.json")))
    return out


def stage_latent(ws: Workspace) -> List[Path]:
    """PCA map, severity sweep, intra/inter-subject distances and neighbor curves with LMMs."""
    model, cfg, lc = ws.model, ws.cfg, ws.cfg.latent
    if not model.has_latent:
        raise Skip(f"model '{model.name}' has no latent space")
    split, out = ws.split, []
    ws.path("latent").mkdir(exist_ok=True)
    sel = json.loads(ws.path("fold_selection.json").read_text())
    train_recs = split.train_folds[sel["fold"]]
    pca = pca_fit(model.latents(ws.volumes(train_recs)), lc.pca_components)
    out.append(dump_json(pca.to_dict(), ws.path("latent", "pca_model.json")))

    points = []

    def add(group, ids, z, severity=None):
        for i, v in zip(ids, pca_project(pca, z)):
            points.append({"image_id": i, "group": group, "severity": severity,
                           "pc1": float(v[0]), "pc2": float(v[1]) if v.size > 1 else 0.0})

    add("train", [r.image_id for r in train_recs], model.latents(ws.volumes(train_recs)))
    test_ids = [r.image_id for r in split.test]
    add("test-CN", test_ids, model.latents(ws.test_volumes))
    add("test-AD", test_ids, model.latents(ws.simulated("AD", cfg.simulation.regional_severity)))

    # severity sweep of a few test subjects
    w = ws.weight_mask("AD")
    sweep_rows = []
    sevs = sorted(lc.sweep_severities)
    for rec, x in list(zip(split.test, ws.test_volumes))[: lc.sweep_subjects]:
        z = model.latents([simulate_hypometabolism(x, w, f) for f in sevs])
        proj = pca_project(pca, z)
        for f, v in zip(sevs, proj):
            points.append({"image_id": rec.image_id, "group": "sim-severity", "severity": f,
                           "pc1": float(v[0]), "pc2": float(v[1]) if v.size > 1 else 0.0})
        sweep_rows.append([rec.image_id, len(sevs), severity_order_correlation(proj, sevs)])
    out.append(dump_json({"points": points, "explained_ratio": pca.explained_ratio.tolist()},
                         ws.path("latent", "pca_points.json")))
    out.append(write_csv(ws.path("latent", "severity_sweep.csv"), ("image_id", "n_severities", "rank_correlation"),
                         sweep_rows))

    # every session of the test subjects: unseen during training
    test_subjects = {r.subject_id for r in split.test}
    recs = [r for r in ws.qc_passed.records if r.subject_id in test_subjects]
    vols = ws.volumes(recs)
    z = model.latents(vols)
    subj = [r.subject_id for r in recs]
    ids = [r.image_id for r in recs]
    ii = intra_inter_study(z, subj, lc.minkowski_p, lc.n_neighbors, ids)
    out.append(write_csv(ws.path("latent", "intra_inter.csv"), ("image_id", "intra", "inter"),
                         list(zip(ii.image_ids, ii.intra, ii.inter))))
    out.append(dump_json(ii.summary(), ws.path("latent", "intra_inter.json")))

    pts = neighbor_image_distance_curves(z, vols, subj, lc.ranks, lc.minkowski_p, ids, cfg.metrics)
    out.append(write_csv(ws.path("latent", "neighbor_curves.csv"),
                         ("image_id", "rank", "neighbor_id", "latent_distance", "mse", "ssim"),
                         [[p.image_id, p.rank, p.neighbor_id, p.latent_distance, p.mse, p.ssim] for p in pts]))
    subject_of = dict(zip(ids, subj))
    fits, lmm_info = {}, {}
    for y in ("mse", "ssim"):
        by_subject: Dict[str, list] = {}
        for image_id, curve in curves_by_image(pts, y).items():
            by_subject.setdefault(subject_of[image_id], []).extend(curve)
        fit = lmm_fit([by_subject[s] for s in sorted(by_subject)])
        fits[y.upper()] = fit
        lmm_info[y.upper()] = {"converged": fit.converged, "n_iter": fit.n_iter, "loglik": fit.loglik,
                               "sigma2": fit.sigma2, "cov_re": fit.cov_re.tolist(),
                               "n_groups": fit.n_groups, "n_obs": fit.n_obs}
    out.append(write_lmm_csv(fits, ws.path("latent", "lmm.csv")))
    out.append(dump_json(lmm_info, ws.path("latent", "lmm_fit.json")))
    return out


STAGE_FUNCS: Dict[str, Callable[[Workspace], List[Path]]] = {
    "data": stage_data,
    "qc": stage_qc,
    "split": stage_split,
    "train": stage_train,
    "simulate": stage_simulate,
    "reconstruction": stage_reconstruction,
    "severity": stage_severity,
    "subtypes": stage_subtypes,
    "healthiness": stage_healthiness,
    "regional": stage_regional,
    "latent": stage_latent,
}


# ------------------------------------------------------------------ running


@dataclass
class RunResult:
    out_dir: Path
    status: Dict[str, dict]

    @property
    def failed(self) -> List[str]:
        return [k for k, v in self.status.items() if v["status"] == "failed"]

    @property
    def ok(self) -> bool:
        return not self.failed


def _load_status(ws: Workspace) -> Dict[str, dict]:
    path = ws.path("status.json")
    return json.loads(path.read_text()) if path.exists() else {}


def run_stages(ws: Workspace, stages: Sequence[str]) -> Dict[str, dict]:
    """Run ``stages`` in pipeline order and merge their outcomes into ``status.json``."""
    status = _load_status(ws)
    for name in STAGES:
        if name not in stages:
            continue
        blocked = [d for d in DEPENDS[name] if status.get(d, {}).get("status") in ("failed", "blocked")]
        if blocked:
            status[name] = {"status": "blocked", "reason": f"upstream stage failed: {', '.join(blocked)}"}
            continue
        log.info("stage %s", name)
        start = time.perf_counter()
        try:
            STAGE_FUNCS[name](ws)
            status[name] = {"status": "ok", "reason": ""}
        except Skip as exc:
            status[name] = {"status": "skipped", "reason": str(exc)}
        except Exception as exc:  # recorded, partial results kept
            log.debug("stage %s failed\n%s", name, traceback.format_exc())
            status[name] = {"status": "failed", "reason": f"{type(exc).__name__}: {exc}"}
        status[name]["seconds"] = round(time.perf_counter() - start, 3)
    ordered = {k: status[k] for k in STAGES if k in status}
    dump_json(ordered, ws.path("status.json"))
    write_manifest_index(ws.root)
    return ordered


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> RunResult:
    """Run the whole suite; analyses absent from ``cfg.analyses`` are recorded as skipped."""
    ws = Workspace(cfg, Path(out_dir or cfg.out_dir))
    save_config(cfg, ws.path("config.json"))
    for stale in ("status.json", "manifest_index.json"):
        ws.path(stale).unlink(missing_ok=True)
    stages = ["data", "qc", "split", "train", "simulate"] + list(cfg.analyses)
    run_stages(ws, stages)
    status = _load_status(ws)
    for name in ANALYSES:
        if name not in cfg.analyses:
            status[name] = {"status": "skipped", "reason": "not requested in config"}
    status = {k: status[k] for k in STAGES if k in status}
    dump_json(status, ws.path("status.json"))
    write_manifest_index(ws.root)
    return RunResult(ws.root, status)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest_index(root: Path) -> Path:
    """Index of every file under ``root`` with size and SHA-256."""
    root = Path(root)
    target = root / "manifest_index.json"
    files = sorted(p for p in root.rglob("*") if p.is_file() and p != target)
    entries = [{"path": p.relative_to(root).as_posix(), "bytes": p.stat().st_size, "sha256": _sha256(p)}
               for p in files]
    return dump_json({"files": entries}, target)


__all__ = ["DEPENDS", "RunResult", "STAGES", "StageError", "Workspace", "read_csv", "run_experiment",
           "run_stages", "write_csv", "write_manifest_index"]
