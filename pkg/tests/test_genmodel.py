import numpy as np
import pytest

from pseudohealthy.genmodel import (
    Architecture,
    IdentityModel,
    LatentStats,
    ModelError,
    TrainConfig,
    VaeModel,
    decode,
    encode,
    encode_many,
    init_params,
    kl_divergence,
    load_checkpoint,
    reconstruct,
    reparameterize,
    save_checkpoint,
    train,
)
from pseudohealthy.genmodel.checkpoint import read_header
from pseudohealthy.genmodel.vae import elbo_loss_batch, full_resolution_conv_descriptor
from pseudohealthy.metrics import mse, ssim
from pseudohealthy.phantom import PhantomParams, generate_phantom
from pseudohealthy.volume import Volume

from conftest import random_volume


def toy_arch(pool=0, latent=3):
    return Architecture(input_dims=(4, 4, 4), pool=pool, encoder_hidden=[5, 4],
                        decoder_hidden=[4, 5], latent_dim=latent)


def perturbed(arch, seed):
    p = init_params(arch, seed)
    rng = np.random.default_rng(seed)
    for k in p.tensors:
        p.tensors[k] = p.tensors[k] + 0.3 * rng.standard_normal(p.tensors[k].shape)
    return p


@pytest.mark.parametrize("pool", [0, 1])
@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_central_differences(pool, seed):
    arch = toy_arch(pool)
    p = perturbed(arch, seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.random((2, 4, 4, 4))
    eps = rng.standard_normal((2, arch.latent_dim))
    _, grads = elbo_loss_batch(p, x, eps, 0.7)
    h = 1e-4
    for name, t in p.tensors.items():
        num = np.zeros_like(t)
        for i in np.ndindex(t.shape):
            orig = t[i]
            t[i] = orig + h
            lp = elbo_loss_batch(p, x, eps, 0.7, with_grad=False)[0].loss
            t[i] = orig - h
            lm = elbo_loss_batch(p, x, eps, 0.7, with_grad=False)[0].loss
            t[i] = orig
            num[i] = (lp - lm) / (2 * h)
        scale = max(np.abs(num).max(), 1e-12)
        assert np.abs(num - grads[name]).max() / scale < 1e-4, name


def test_zero_weights_encode_to_origin_and_decode_to_half():
    arch = toy_arch()
    p = init_params(arch, zero=True)
    stats = encode(p, Volume(np.random.default_rng(0).random((4, 4, 4))))
    np.testing.assert_array_equal(stats.mu, np.zeros(3))
    np.testing.assert_allclose(stats.sigma, np.ones(3))
    y = decode(p, np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(y.data, 0.5)


def test_kl_divergence_examples():
    assert kl_divergence(LatentStats(np.zeros(4), np.ones(4))) == 0.0
    # 0.5 * (mu^2) for unit variance
    assert kl_divergence(LatentStats([1.0, 2.0], [1.0, 1.0])) == pytest.approx(2.5)
    # 0.5 * (s^2 - ln s^2 - 1) with s = 2
    assert kl_divergence(LatentStats([0.0], [2.0])) == pytest.approx(0.5 * (4 - np.log(4) - 1))


def test_kl_matches_coordinate_loop(rng):
    mu, sigma = rng.standard_normal(16), rng.uniform(0.1, 3.0, 16)
    oracle = sum(0.5 * (s * s + m * m - np.log(s * s) - 1) for m, s in zip(mu, sigma))
    assert kl_divergence(LatentStats(mu, sigma)) == pytest.approx(oracle, rel=1e-12)


def test_hand_computed_forward_pass():
    arch = Architecture(input_dims=(2, 1, 1), pool=0, encoder_hidden=[2], decoder_hidden=[2], latent_dim=1)
    p = init_params(arch, zero=True)
    t = p.tensors
    t["enc0.W"][:] = [[1.0, -1.0], [0.5, 2.0]]
    t["enc0.b"][:] = [0.1, -0.2]
    t["enc1.W"][:] = [[1.0, 0.3], [-0.5, 0.2]]
    t["enc1.b"][:] = [0.0, -1.0]
    x = np.array([0.4, 0.8])
    h = np.maximum(x @ t["enc0.W"] + t["enc0.b"], 0)
    out = h @ t["enc1.W"] + t["enc1.b"]
    stats = encode(p, Volume(x.reshape(2, 1, 1)))
    assert stats.mu[0] == pytest.approx(out[0], rel=1e-12)
    assert stats.sigma[0] == pytest.approx(np.exp(0.5 * out[1]), rel=1e-12)
    t["dec0.W"][:] = [[2.0, -1.0]]
    t["dec0.b"][:] = [0.5, 0.5]
    t["dec1.W"][:] = [[1.0, 0.0], [0.5, -1.0]]
    t["dec1.b"][:] = [0.0, 0.1]
    a = np.array([0.7]) @ t["dec0.W"] + t["dec0.b"]
    a = np.where(a > 0, a, 0.01 * a) @ t["dec1.W"] + t["dec1.b"]
    np.testing.assert_allclose(decode(p, np.array([0.7])).data.ravel(), 1 / (1 + np.exp(-a)), rtol=1e-12)


def test_zero_kl_weight_leaves_plain_mse(rng):
    p = perturbed(toy_arch(), 2)
    x = rng.random((3, 4, 4, 4))
    eps = rng.standard_normal((3, 3))
    terms, _ = elbo_loss_batch(p, x, eps, 0.0)
    assert terms.loss == terms.mse


def test_reparameterize_small_sigma_limit(rng):
    mu = rng.standard_normal(5)
    z = reparameterize(LatentStats(mu, np.full(5, 1e-12)), rng)
    np.testing.assert_allclose(z, mu, atol=1e-10)


def test_latent_stats_validation():
    with pytest.raises(ModelError):
        LatentStats([0.0, 0.0], [1.0])
    with pytest.raises(ModelError):
        LatentStats([0.0], [0.0])


def test_reparameterize_uses_mean_and_scale():
    stats = LatentStats([1.0, -1.0], [0.5, 2.0])
    z = reparameterize(stats, np.random.default_rng(3))
    eps = np.random.default_rng(3).standard_normal(2)
    np.testing.assert_allclose(z, [1.0 + 0.5 * eps[0], -1.0 + 2.0 * eps[1]])
    draws = np.array([reparameterize(stats, np.random.default_rng(s)) for s in range(4000)])
    np.testing.assert_allclose(draws.mean(axis=0), [1.0, -1.0], atol=0.1)
    np.testing.assert_allclose(draws.std(axis=0), [0.5, 2.0], rtol=0.05)


def test_architecture_validation():
    with pytest.raises(ModelError):
        Architecture(input_dims=(6, 6, 6), pool=2)
    with pytest.raises(ModelError):
        Architecture(input_dims=(4, 4, 4), kind="conv")
    with pytest.raises(ModelError):
        Architecture(input_dims=(4, 4, 4), latent_dim=0)


def test_conv_descriptor_is_not_trainable():
    desc = full_resolution_conv_descriptor(latent_dim=16)
    assert desc["latent_dim"] == 16 and desc["encoder"]["blocks"] == 5
    with pytest.raises(ModelError):
        Architecture(input_dims=(4, 4, 4), kind=desc["kind"])


def test_full_resolution_preset():
    cfg = TrainConfig.full_resolution_preset(epochs=3)
    assert (cfg.epochs, cfg.learning_rate, cfg.batch_size, cfg.kl_weight) == (3, 1e-5, 8, 1.0)


def test_decode_rejects_wrong_latent_length():
    p = init_params(toy_arch())
    with pytest.raises(ModelError):
        decode(p, np.zeros(4))


def test_encode_many_matches_single_encodes(rng):
    p = perturbed(toy_arch(), 1)
    vols = [random_volume(rng, (4, 4, 4)) for _ in range(5)]
    mus = encode_many(p, vols, batch=2)
    for v, row in zip(vols, mus):
        np.testing.assert_allclose(row, encode(p, v).mu, atol=1e-12)


def _blobs(n, seed=0):
    rng = np.random.default_rng(seed)
    grid = np.stack(np.meshgrid(*[np.arange(8)] * 3, indexing="ij"), -1)
    vols = []
    for _ in range(n):
        c = rng.uniform(2, 6, 3)
        vols.append(Volume(0.2 + 0.6 * np.exp(-np.sum((grid - c) ** 2, -1) / 4.0)))
    return vols


SMALL = dict(input_dims=(8, 8, 8), encoder_hidden=[32], decoder_hidden=[32], latent_dim=4)


def test_zero_learning_rate_leaves_parameters_unchanged():
    vols = _blobs(6)
    arch = Architecture(**SMALL)
    a = train(vols, TrainConfig(epochs=2, learning_rate=0.0, batch_size=4), arch).params
    b = train(vols, TrainConfig(epochs=0, batch_size=4), arch).params
    for k in a.tensors:
        np.testing.assert_array_equal(a.tensors[k], b.tensors[k])


def test_training_is_deterministic():
    vols = _blobs(6)
    cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=1e-3, rng_seed=5, kl_weight=1e-3)
    a = train(vols, cfg, Architecture(**SMALL))
    b = train(vols, cfg, Architecture(**SMALL))
    assert a.trace == b.trace
    for k in a.params.tensors:
        np.testing.assert_array_equal(a.params.tensors[k], b.params.tensors[k])


def test_single_image_loss_decreases():
    vols = _blobs(1)
    # start from a generic output so the decrease comes from gradient steps alone
    cfg = TrainConfig(epochs=40, batch_size=1, learning_rate=1e-3, kl_weight=1e-4,
                      init_output_from_data=False)
    res = train(vols, cfg, Architecture(**SMALL))
    first = [r["mse_term"] for r in res.trace[:10]]
    assert all(a > b for a, b in zip(first, first[1:]))
    assert res.trace[-1]["mse_term"] < 0.5 * res.trace[0]["mse_term"]


def test_trace_reports_validation_loss():
    vols = _blobs(6)
    res = train(vols[:4], TrainConfig(epochs=2, batch_size=2), Architecture(**SMALL), val_volumes=vols[4:])
    assert [r["epoch"] for r in res.trace] == [1, 2]
    assert all(r["val_loss"] is not None and np.isfinite(r["val_loss"]) for r in res.trace)


def test_train_rejects_empty_set():
    with pytest.raises(ValueError):
        train([], TrainConfig())


def test_checkpoint_round_trip(tmp_path, rng):
    p = train(_blobs(4), TrainConfig(epochs=1, batch_size=2), Architecture(**SMALL)).params
    path = save_checkpoint(p, tmp_path / "m.phv", extra={"fold": 2})
    q = load_checkpoint(path)
    assert q.arch == p.arch
    for k in p.tensors:
        np.testing.assert_array_equal(q.tensors[k], p.tensors[k])
    assert read_header(path)["extra"] == {"fold": 2}
    v = random_volume(rng, (8, 8, 8))
    np.testing.assert_array_equal(reconstruct(q, v).data, reconstruct(p, v).data)


def test_checkpoint_rejects_foreign_and_truncated_files(tmp_path):
    (tmp_path / "x.phv").write_bytes(b"not a model")
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "x.phv")
    p = init_params(toy_arch())
    path = save_checkpoint(p, tmp_path / "m.phv")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ModelError):
        load_checkpoint(path)


def test_identity_baseline_returns_input(rng):
    v = random_volume(rng)
    model = IdentityModel()
    assert model.reconstruct(v) is v
    assert mse(v, model.reconstruct(v)) == 0.0
    assert model.latents([v]) is None and not model.has_latent


@pytest.mark.slow
def test_vae_beats_mean_image_on_phantoms():
    params = PhantomParams(dims=(32, 32, 32), spacing_mm=(6.0, 6.0, 6.0), n_subjects=30,
                           sessions_per_subject=1, session_noise_sigma=0.0, global_seed=3)
    vols = [generate_phantom(params, s, 0) for s in range(params.n_subjects)]
    train_v, held = vols[:24], vols[24:]
    arch = Architecture(input_dims=(32, 32, 32), spacing_mm=(6.0, 6.0, 6.0), pool=0,
                        encoder_hidden=[128], decoder_hidden=[128], latent_dim=8)
    res = train(train_v, TrainConfig(epochs=40, batch_size=4, learning_rate=1e-4, kl_weight=1e-5), arch)
    model = VaeModel(res.params)
    mean_img = Volume(np.mean([v.data for v in train_v], axis=0), vols[0].spacing)
    base = np.mean([mse(v, mean_img) for v in held])
    recon = model.reconstruct_many(held)
    got = np.mean([mse(v, y) for v, y in zip(held, recon)])
    assert got < base
    assert np.mean([ssim(v, y) for v, y in zip(held, recon)]) > np.mean([ssim(v, mean_img) for v in held])
