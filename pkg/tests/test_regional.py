import numpy as np
import pytest

from pseudohealthy.phantom import Atlas
from pseudohealthy.regional import (
    regional_anomaly_report,
    regional_summary,
    regional_uptake,
    violin_data,
    write_regional_csv,
)
from pseudohealthy.simulate import simulate_hypometabolism
from pseudohealthy.volume import Volume


def test_uniform_volume(small_atlas):
    u = regional_uptake(small_atlas.brain_mask().with_data(np.ones(small_atlas.labels.dims)), small_atlas)
    assert all(v == pytest.approx(1.0) for v in u.means.values())


def test_single_region_attenuation(small_atlas, rng):
    x = Volume(rng.random(small_atlas.labels.dims) + 0.5, small_atlas.labels.spacing)
    y = simulate_hypometabolism(x, small_atlas.region_mask([5]), 0.3)
    a, b = regional_uptake(x, small_atlas).means, regional_uptake(y, small_atlas).means
    assert b[5] == pytest.approx(0.7 * a[5], rel=1e-12)
    assert all(a[r] == pytest.approx(b[r], rel=1e-15) for r in a if r != 5)


def test_region_means_match_voxel_loop(small_atlas, rng):
    data = rng.random(small_atlas.labels.dims)
    sums, counts = {}, {}
    merged = small_atlas.merged_labels
    for idx in np.ndindex(*data.shape):
        r = int(merged[idx])
        if r:
            sums[r] = sums.get(r, 0.0) + data[idx]
            counts[r] = counts.get(r, 0) + 1
    got = regional_uptake(Volume(data, small_atlas.labels.spacing), small_atlas).means
    for r in got:
        assert got[r] == pytest.approx(sums[r] / counts[r], rel=1e-12)


def _cohort(atlas, rng, n=20):
    return [Volume(0.7 + 0.05 * rng.standard_normal(atlas.labels.dims), atlas.labels.spacing) for _ in range(n)]


def test_identical_reconstruction_is_never_significant(small_atlas, rng):
    xs = _cohort(small_atlas, rng)
    rows = regional_anomaly_report([(x, x) for x in xs], small_atlas)
    assert all(r.result.p_value == 1.0 and not r.significant for r in rows)
    rows = regional_anomaly_report([(x, x) for x in xs], small_atlas, method="welch_t")
    assert all(r.result.p_value == 1.0 for r in rows)


def test_detects_exactly_the_attenuated_regions(small_atlas, rng):
    xs = _cohort(small_atlas, rng)
    mask = small_atlas.region_mask([2, 9])
    pairs = [(simulate_hypometabolism(x, mask, 0.3), x) for x in xs]
    rows = regional_anomaly_report(pairs, small_atlas)
    s = regional_summary(rows, [2, 9])
    assert s["expected_detected"] == [2, 9]
    assert s["false_positive_regions"] == []
    assert s["non_mask_clean_fraction"] == 1.0


def test_single_region_atlas_keeps_raw_p(rng):
    labels = np.zeros((6, 6, 6), dtype=np.int32)
    labels[1:5, 1:5, 1:5] = 1
    atlas = Atlas(Volume(labels), {1: "only"}, {1: 1}, {1: "only"})
    xs = [Volume(rng.random((6, 6, 6))) for _ in range(6)]
    ys = [Volume(rng.random((6, 6, 6)) * 0.5) for _ in range(6)]
    rows = regional_anomaly_report(list(zip(xs, ys)), atlas, method="welch_t")
    assert rows[0].result.p_adjusted == rows[0].result.p_value


def test_errors_are_recorded_per_region(small_atlas):
    const = [Volume(np.full(small_atlas.labels.dims, 0.5), small_atlas.labels.spacing)] * 3
    other = [Volume(np.full(small_atlas.labels.dims, 0.4), small_atlas.labels.spacing)] * 3
    rows = regional_anomaly_report(list(zip(const, other)), small_atlas, method="welch_t")
    assert all(r.error and r.result is None for r in rows)
    with pytest.raises(ValueError):
        regional_anomaly_report([(const[0], other[0])], small_atlas)


def test_reference_columns_and_csv(tmp_path, small_atlas, rng):
    xs = _cohort(small_atlas, rng, 8)
    rows = regional_anomaly_report([(x, x) for x in xs], small_atlas, reference=xs)
    path = write_regional_csv(rows, tmp_path / "r.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert "p_reference_adjusted" in header and header[-1] == "error"
    v = violin_data({"x": xs}, small_atlas)
    assert len(v["series"]["x"]["1"]) == 8
