import numpy as np
import pytest

from pseudohealthy.phantom import generate_phantom, outside_brain_mask
from pseudohealthy.pipeline.qc import qc_overlap, write_qc_csv
from pseudohealthy.volume import Volume


def test_aligned_phantom_passes(small_atlas, small_params):
    out = outside_brain_mask(small_atlas, margin_mm=8.0)
    res = qc_overlap(generate_phantom(small_params, 0, 0), out, image_id="a")
    assert res.passed and res.score < 0.02


def test_shifted_phantom_scores_higher(small_atlas, small_params):
    out = outside_brain_mask(small_atlas, margin_mm=8.0)
    x = generate_phantom(small_params, 0, 0)
    shifted = x.with_data(np.roll(x.data, 8, axis=0))
    a, b = qc_overlap(x, out), qc_overlap(shifted, out)
    assert b.score > a.score
    assert not qc_overlap(shifted, out, threshold=a.score * 2).passed


def test_score_by_hand():
    x = Volume(np.ones((4, 4, 4)))
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[0] = True
    res = qc_overlap(x, Volume(mask), threshold=0.25)
    assert res.score == 0.25 and res.passed


def test_zero_image_is_an_error():
    with pytest.raises(ValueError):
        qc_overlap(Volume(np.zeros((4, 4, 4))), Volume(np.ones((4, 4, 4), dtype=bool)))


def test_csv(tmp_path):
    x = Volume(np.ones((4, 4, 4)))
    res = qc_overlap(x, Volume(np.zeros((4, 4, 4), dtype=bool)), image_id="s1")
    text = write_qc_csv([res], tmp_path / "qc.csv").read_text().splitlines()
    assert text == ["image_id,score,passed", "s1,0.0,true"]
