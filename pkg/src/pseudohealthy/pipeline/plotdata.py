"""Plot-ready JSON series derived from a finished run directory."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List

from ..regional import dump_json
from ..volume import PathLike
from .experiment import read_csv


class ReportMissingError(FileNotFoundError):
    def __init__(self, missing: List[str]):
        super().__init__("report sections missing: " + ", ".join(missing))
        self.missing = missing


@dataclass
class PlotDataResult:
    written: Dict[str, Path] = field(default_factory=dict)
    missing: Dict[str, str] = field(default_factory=dict)


def _floats(rows, key):
    return [float(r[key]) for r in rows]


def _group(rows, key):
    out: Dict[str, list] = {}
    for r in rows:
        out.setdefault(r[key], []).append(r)
    return out


def _reconstruction(root: Path) -> dict:
    rows = read_csv(root / "results" / "reconstruction_metrics.csv")
    return {"kind": "box", "groups": [{"label": m, "values": _floats(rows, m)}
                                      for m in ("mse", "psnr", "ssim", "ms_ssim")]}


def _severity(root: Path) -> dict:
    series = []
    for sev, rows in _group(read_csv(root / "results" / "severity_mse.csv"), "severity").items():
        series.append({"severity": float(sev), "series": [
            {"label": "MSE(x, x_hat')", "values": _floats(rows, "mse_x_xhatp")},
            {"label": "MSE(x', x_hat')", "values": _floats(rows, "mse_xp_xhatp")},
        ]})
    tests = read_csv(root / "results" / "severity_tests.csv")
    return {"kind": "box", "by_severity": series,
            "p_adjusted": {t["severity"]: (float(t["p_adjusted"]) if t["p_adjusted"] else None) for t in tests}}


def _healthiness(root: Path) -> dict:
    sets = []
    for (subtype, sev), rows in _group_pairs(read_csv(root / "results" / "healthiness.csv")).items():
        sets.append({"subtype": subtype, "severity": float(sev), "series": [
            {"label": "ground truth", "values": _floats(rows, "h_x")},
            {"label": "simulated", "values": _floats(rows, "h_xp")},
            {"label": "reconstruction", "values": _floats(rows, "h_xhatp")},
        ]})
    return {"kind": "violin", "sets": sets}


def _group_pairs(rows):
    out: Dict[tuple, list] = {}
    for r in rows:
        out.setdefault((r["subtype"], r["severity"]), []).append(r)
    return out


def _subtypes(root: Path) -> dict:
    out = []
    for subtype, rows in _group(read_csv(root / "results" / "subtype_metrics.csv"), "subtype").items():
        out.append({"subtype": subtype, "series": [
            {"label": m, "values": _floats(rows, m)} for m in ("mse", "psnr", "ssim", "ms_ssim", "ssim_xhat_xhatp")
        ]})
    return {"kind": "box", "subtypes": out}


def _regional(root: Path) -> dict:
    files = sorted((root / "regional").glob("*_violin.json"))
    if not files:
        raise FileNotFoundError(2, "no regional violin data", str(root / "regional"))
    return {"kind": "violin", "sets": {p.name[: -len("_violin.json")]: json.loads(p.read_text()) for p in files}}


def _pca(root: Path) -> dict:
    d = json.loads((root / "latent" / "pca_points.json").read_text())
    return {"kind": "scatter", "points": d["points"], "explained_ratio": d["explained_ratio"]}


def _intra_inter(root: Path) -> dict:
    rows = read_csv(root / "latent" / "intra_inter.csv")
    return {"kind": "box", "series": [{"label": "intra-subject", "values": _floats(rows, "intra")},
                                      {"label": "inter-subject", "values": _floats(rows, "inter")}]}


def _neighbors(root: Path) -> dict:
    curves = {}
    for image_id, rows in _group(read_csv(root / "latent" / "neighbor_curves.csv"), "image_id").items():
        curves[image_id] = {"rank": [int(r["rank"]) for r in rows],
                            "latent_distance": _floats(rows, "latent_distance"),
                            "mse": _floats(rows, "mse"), "ssim": _floats(rows, "ssim")}
    return {"kind": "lines", "curves": curves}


def _relative(path, root: Path) -> str:
    try:
        return Path(path).relative_to(root).as_posix()
    except (TypeError, ValueError):
        return str(path)


SECTIONS: Dict[str, Callable[[Path], dict]] = {
    "reconstruction": _reconstruction,
    "severity": _severity,
    "healthiness": _healthiness,
    "subtypes": _subtypes,
    "regional": _regional,
    "pca": _pca,
    "intra_inter": _intra_inter,
    "neighbor_curves": _neighbors,
}


def emit_plot_data(run_dir: PathLike, out_dir: PathLike = None) -> PlotDataResult:
    """Write one JSON file per available section under ``<run_dir>/plots``.

    Missing sections are listed in ``plots/index.json``; only a run directory
    with no section at all is an error.
    """
    root = Path(run_dir)
    out = Path(out_dir) if out_dir else root / "plots"
    data, result = {}, PlotDataResult()
    for name, build in SECTIONS.items():
        try:
            data[name] = build(root)
        except FileNotFoundError as exc:
            result.missing[name] = "missing " + _relative(exc.filename, root)
        except (KeyError, ValueError) as exc:
            result.missing[name] = f"malformed: {exc}"
    if not data:
        raise ReportMissingError(sorted(result.missing))
    out.mkdir(parents=True, exist_ok=True)
    for name, d in data.items():
        result.written[name] = dump_json(d, out / f"{name}.json")
    dump_json({"sections": sorted(data), "missing": result.missing}, out / "index.json")
    return result


__all__ = ["PlotDataResult", "ReportMissingError", "SECTIONS", "emit_plot_data"]
