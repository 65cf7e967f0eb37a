"""Optional PNG rendering of emitted plot data.

matplotlib is an optional dependency (the ``figures`` extra) and is only
imported when rendering is requested.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List

from ..volume import PathLike


class FiguresUnavailable(RuntimeError):
    pass


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise FiguresUnavailable(
            "figure rendering needs matplotlib: pip install 'pseudohealthy[figures]'"
        ) from exc
    return plt


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # no software tag: PNG bytes stay stable across matplotlib versions
    fig.savefig(path, dpi=100, metadata={"Software": None})
    return path


def _severity(plt, d, path):
    fig, ax = plt.subplots(figsize=(8, 4))
    labels, data = [], []
    for block in d["by_severity"]:
        for s in block["series"]:
            labels.append(f"{s['label']}\n{block['severity']:g}")
            data.append(s["values"])
    ax.boxplot(data)
    ax.set_xticks(range(1, len(labels) + 1), labels, fontsize=6, rotation=90)
    ax.set_ylabel("MSE")
    return _save(fig, path)


def _healthiness(plt, d, path):
    sets = d["sets"]
    fig, ax = plt.subplots(figsize=(max(6, len(sets) * 1.2), 4))
    pos, data, ticks, names = 0, [], [], []
    for s in sets:
        for k, series in enumerate(s["series"]):
            data.append(series["values"])
            ticks.append(pos + k)
        names.append((pos + 1, f"{s['subtype']} {s['severity']:g}"))
        pos += len(s["series"]) + 1
    parts = ax.violinplot(data, positions=ticks, showmeans=True)
    for i, body in enumerate(parts["bodies"]):
        body.set_facecolor(("tab:green", "tab:red", "tab:blue")[i % 3])
    ax.set_xticks([p for p, _ in names], [n for _, n in names], fontsize=7, rotation=45)
    ax.set_ylabel("healthiness")
    return _save(fig, path)


def _pca(plt, d, path):
    fig, ax = plt.subplots(figsize=(5, 5))
    groups: Dict[str, List[dict]] = {}
    for p in d["points"]:
        groups.setdefault(p["group"], []).append(p)
    for name in sorted(groups):
        pts = groups[name]
        ax.scatter([p["pc1"] for p in pts], [p["pc2"] for p in pts], s=8, label=name)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(fontsize=7)
    return _save(fig, path)


def _box(plt, d, path):
    series = d.get("series") or d.get("groups")
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.boxplot([s["values"] for s in series])
    ax.set_xticks(range(1, len(series) + 1), [s["label"] for s in series])
    return _save(fig, path)


def _neighbors(plt, d, path):
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for curve in d["curves"].values():
        axes[0].plot(curve["latent_distance"], curve["mse"], lw=0.5, alpha=0.5)
        axes[1].plot(curve["latent_distance"], curve["ssim"], lw=0.5, alpha=0.5)
    for ax, name in zip(axes, ("MSE", "SSIM")):
        ax.set_xlabel("latent distance")
        ax.set_ylabel(name)
    return _save(fig, path)


RENDERERS = {
    "severity": _severity,
    "healthiness": _healthiness,
    "pca": _pca,
    "reconstruction": _box,
    "intra_inter": _box,
    "neighbor_curves": _neighbors,
}


def render_figures(plot_dir: PathLike, out_dir: PathLike = None) -> List[Path]:
    """Render a PNG for every emitted section that has a renderer."""
    plot_dir = Path(plot_dir)
    out = Path(out_dir) if out_dir else plot_dir / "figures"
    plt = _pyplot()
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, render in RENDERERS.items():
        src = plot_dir / f"{name}.json"
        if not src.exists():
            continue
        try:
            written.append(render(plt, json.loads(src.read_text()), out / f"{name}.png"))
        finally:
            plt.close("all")
    return written


__all__ = ["FiguresUnavailable", "render_figures"]
