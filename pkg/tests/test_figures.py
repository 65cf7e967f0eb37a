import builtins

import pytest

from pseudohealthy.pipeline import emit_plot_data, run_experiment
from pseudohealthy.pipeline.figures import FiguresUnavailable, render_figures

from test_experiment import tiny


@pytest.fixture(scope="module")
def plot_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("fig")
    run_experiment(tiny(), root)
    emit_plot_data(root)
    return root / "plots"


def test_renders_pngs(plot_dir):
    pytest.importorskip("matplotlib")
    paths = render_figures(plot_dir)
    names = {p.name for p in paths}
    assert {"severity.png", "healthiness.png", "pca.png"} <= names
    for p in paths:
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_rendering_is_deterministic(plot_dir, tmp_path):
    pytest.importorskip("matplotlib")
    a = render_figures(plot_dir, tmp_path / "a")
    b = render_figures(plot_dir, tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_missing_matplotlib_is_reported(plot_dir, tmp_path, monkeypatch):
    real_import = builtins.__import__

    def fake_import(name, *args, **kwargs):
        if name.startswith("matplotlib"):
            raise ImportError(name)
        return real_import(name, *args, **kwargs)

    monkeypatch.setattr(builtins, "__import__", fake_import)
    with pytest.raises(FiguresUnavailable, match="figures"):
        render_figures(plot_dir, tmp_path)
