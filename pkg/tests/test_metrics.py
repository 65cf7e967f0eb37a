import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pseudohealthy.metrics import (
    MetricConfig,
    healthiness,
    image_metrics,
    ms_ssim,
    mse,
    psnr,
    ssim,
)
from pseudohealthy.volume import Volume, VolumeError, constant_volume


def _loop_stats(a, b):
    """Mean, population variance and covariance with explicit accumulation."""
    fa, fb = a.ravel().tolist(), b.ravel().tolist()
    n = len(fa)
    ma = sum(fa) / n
    mb = sum(fb) / n
    va = sum((u - ma) ** 2 for u in fa) / n
    vb = sum((v - mb) ** 2 for v in fb) / n
    cov = sum((u - ma) * (v - mb) for u, v in zip(fa, fb)) / n
    return ma, mb, va, vb, cov


def ssim_oracle(a, b, c1=0.01, c2=0.03):
    ma, mb, va, vb, cov = _loop_stats(a, b)
    return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))


def _pool(a):
    n = [d // 2 for d in a.shape]
    out = np.zeros(n)
    for i in range(2):
        for j in range(2):
            for k in range(2):
                out += a[i : 2 * n[0] : 2, j : 2 * n[1] : 2, k : 2 * n[2] : 2]
    return out / 8


def msssim_oracle(a, b, weights, c1=0.01, c2=0.03):
    value = 1.0
    for j, w in enumerate(weights):
        if j:
            a, b = _pool(a), _pool(b)
        ma, mb, va, vb, cov = _loop_stats(a, b)
        lum = (2 * ma * mb + c1) / (ma**2 + mb**2 + c1)
        c = (2 * math.sqrt(va) * math.sqrt(vb) + c2) / (va + vb + c2)
        s = (cov + c2 / 2) / (math.sqrt(va) * math.sqrt(vb) + c2 / 2)
        cs = c * s
        value *= math.copysign(abs(cs) ** w, cs)
        if j == len(weights) - 1:
            value *= lum**w
    return value


def test_mse_examples(rng):
    x = rng.random((5, 5, 5))
    assert mse(Volume(x), Volume(x)) == 0.0
    assert mse(constant_volume((3, 3, 3), 0), constant_volume((3, 3, 3), 0.1)) == pytest.approx(0.01, rel=1e-12)
    y = rng.random((5, 5, 5))
    naive = sum((u - v) ** 2 for u, v in zip(x.ravel(), y.ravel())) / x.size
    assert mse(Volume(x), Volume(y)) == pytest.approx(naive, rel=1e-12)


def test_psnr_examples():
    z = constant_volume((2, 2, 2), 0.0)
    assert psnr(z, constant_volume((2, 2, 2), 0.1)) == pytest.approx(20.0)
    assert psnr(z, constant_volume((2, 2, 2), 1.0)) == pytest.approx(0.0)
    assert psnr(z, z) == math.inf


def test_ssim_constants_and_identity(rng):
    a, b = 0.3, 0.7
    x, y = constant_volume((4, 4, 4), a), constant_volume((4, 4, 4), b)
    assert ssim(x, y) == pytest.approx((2 * a * b + 0.01) / (a * a + b * b + 0.01), rel=1e-12)
    v = Volume(rng.random((6, 6, 6)))
    assert ssim(v, v) == 1.0
    assert ms_ssim(Volume(rng.random((32, 32, 32))), Volume(rng.random((32, 32, 32)))) < 1.0


def test_ssim_matches_loop_oracle(rng):
    for _ in range(5):
        x, y = rng.random((6, 7, 8)), rng.random((6, 7, 8))
        assert ssim(Volume(x), Volume(y)) == pytest.approx(ssim_oracle(x, y), rel=1e-9)


def test_msssim_too_small():
    with pytest.raises(VolumeError, match="too small"):
        ms_ssim(constant_volume((8, 8, 8), 1), constant_volume((8, 8, 8), 1))


def test_msssim_matches_scale_oracle(rng):
    x = rng.random((64, 64, 64))
    y = np.clip(x + 0.2 * rng.standard_normal(x.shape), 0, 1)
    cfg = MetricConfig()
    got = ms_ssim(Volume(x), Volume(y), cfg)
    assert got == pytest.approx(msssim_oracle(x, y, cfg.msssim_weights), rel=1e-6)


def test_metric_config_validation():
    with pytest.raises(ValueError):
        MetricConfig(msssim_levels=3)
    with pytest.raises(ValueError):
        MetricConfig(ssim_c1=0)


def test_windowed_ssim_identity(rng):
    v = Volume(rng.random((10, 10, 10)))
    assert ssim(v, v, MetricConfig(ssim_window=3)) == pytest.approx(1.0)


def test_image_metrics_bundle(rng):
    x, y = Volume(rng.random((32, 32, 32))), Volume(rng.random((32, 32, 32)))
    m = image_metrics(x, y)
    assert m.mse == mse(x, y) and m.ssim == ssim(x, y) and m.ms_ssim == ms_ssim(x, y)


def test_healthiness_cases():
    brain = constant_volume((6, 6, 6), 1.0)
    mask = np.zeros((6, 6, 6))
    mask[:2] = 1
    mask = Volume(mask)
    assert healthiness(constant_volume((6, 6, 6), 0.6), mask, brain) == pytest.approx(1.0)
    x = np.ones((6, 6, 6))
    x[:2] *= 0.7
    assert healthiness(Volume(x), mask, brain) == pytest.approx(0.7)
    with pytest.raises(VolumeError, match="empty region"):
        healthiness(Volume(x), constant_volume((6, 6, 6), 0), brain)
    with pytest.raises(VolumeError, match="empty region"):
        healthiness(Volume(x), brain, brain)


unit = arrays(np.float64, (4, 4, 4), elements=st.floats(0, 1))


@settings(max_examples=40, deadline=None)
@given(unit, unit)
def test_metric_properties(a, b):
    x, y = Volume(a), Volume(b)
    assert mse(x, y) == pytest.approx(mse(y, x))
    assert ssim(x, y) == pytest.approx(ssim(y, x))
    assert -1.0 - 1e-12 <= ssim(x, y) <= 1.0 + 1e-12
    assert mse(x, y) >= 0
