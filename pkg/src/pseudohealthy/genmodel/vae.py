"""Fully-connected VAE with explicit forward and backward passes.

The model works on a fixed working grid. Inputs are average-pooled ``pool``
times before the encoder and decoder outputs are replicated back to the
working grid, so the dense layers see ``prod(dims) / 8**pool`` voxels.
Encoder inputs are standardized as ``(x - in.shift) * in.scale``; both are
ordinary tensors (so gradients cover them) that training sets from the data
and then keeps frozen.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..volume import Volume, VolumeError


class ModelError(ValueError):
    pass


class NumericalOverflowError(FloatingPointError):
    pass


@dataclass
class Architecture:
    input_dims: Tuple[int, int, int] = (32, 32, 32)
    spacing_mm: Tuple[float, float, float] = (4.0, 4.0, 4.0)
    pool: int = 1
    encoder_hidden: List[int] = field(default_factory=lambda: [1024, 256])
    decoder_hidden: List[int] = field(default_factory=lambda: [256, 1024])
    latent_dim: int = 256
    encoder_activation: str = "relu"
    decoder_activation: str = "leaky_relu"
    leaky_slope: float = 0.01
    kind: str = "mlp"

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.kind != "mlp":
            raise ModelError(f"architecture kind {self.kind!r} is not implemented (only 'mlp')")
        factor = 2**self.pool
        if any(d % factor for d in self.input_dims):
            raise ModelError(f"input dims {self.input_dims} not divisible by pooling factor {factor}")
        for act in (self.encoder_activation, self.decoder_activation):
            if act not in _ACTIVATIONS:
                raise ModelError(f"unknown activation {act!r}")
        if self.latent_dim < 1:
            raise ModelError("latent_dim must be positive")

    @property
    def pooled_dims(self) -> Tuple[int, int, int]:
        return tuple(d // 2**self.pool for d in self.input_dims)

    @property
    def n_visible(self) -> int:
        return int(np.prod(self.pooled_dims))

    def layer_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {"in.shift": (self.n_visible,), "in.scale": (1,)}
        sizes = [self.n_visible] + list(self.encoder_hidden) + [2 * self.latent_dim]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"enc{i}.W"], shapes[f"enc{i}.b"] = (a, b), (b,)
        sizes = [self.latent_dim] + list(self.decoder_hidden) + [self.n_visible]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"dec{i}.W"], shapes[f"dec{i}.b"] = (a, b), (b,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["spacing_mm"] = list(self.spacing_mm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


def full_resolution_conv_descriptor(latent_dim: int = 256) -> dict:
    """Descriptor of the full-resolution convolutional layout (not trainable here)."""
    return {
        "kind": "conv",
        "latent_dim": latent_dim,
        "encoder": {"blocks": 5, "layer": "conv3d+batchnorm+relu",
                    "kernel": [4, 4, 4], "stride": [2, 2, 2], "padding": [1, 1, 1]},
        "decoder": {"blocks": 4, "layer": "upsample+conv3d+batchnorm+leaky_relu",
                    "kernel": [3, 3, 3], "stride": [1, 1, 1], "padding": [1, 1, 1],
                    "output": "upsample+conv3d+sigmoid"},
        "channels": "configurable",
    }


def _relu(a, slope):
    return np.maximum(a, 0.0)


def _relu_grad(a, slope):
    return (a > 0).astype(a.dtype)


def _leaky(a, slope):
    return np.where(a > 0, a, slope * a)


def _leaky_grad(a, slope):
    return np.where(a > 0, 1.0, slope)


_ACTIVATIONS = {"relu": (_relu, _relu_grad), "leaky_relu": (_leaky, _leaky_grad)}


@dataclass
class LatentStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise ModelError("mu and sigma must have equal length")
        if np.any(self.sigma <= 0):
            raise ModelError("sigma must be strictly positive")


@dataclass
class VaeParams:
    arch: Architecture
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.arch.layer_shapes()
        if list(self.tensors) != list(expected):
            self.tensors = {k: self.tensors[k] for k in expected if k in self.tensors}
        for name, shape in expected.items():
            t = self.tensors.get(name)
            if t is None or t.shape != shape:
                got = None if t is None else t.shape
                raise ModelError(f"tensor {name} has shape {got}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ModelError(f"tensor {name} has non-finite values")

    def copy(self) -> "VaeParams":
        return VaeParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def layers(self, prefix: str) -> List[Tuple[np.ndarray, np.ndarray]]:
        n = sum(1 for k in self.tensors if k.startswith(prefix) and k.endswith(".W"))
        return [(self.tensors[f"{prefix}{i}.W"], self.tensors[f"{prefix}{i}.b"]) for i in range(n)]


def init_params(arch: Architecture, seed: int = 0, zero: bool = False,
                last_scale: float = 0.1, logvar_bias: float = 0.0, out_scale: float = 1.0) -> VaeParams:
    """He-normal weights and zero biases.

    The last encoder layer is scaled by ``last_scale``; ``logvar_bias`` sets the
    initial posterior log-variance (a negative value keeps early latent noise
    from drowning the signal); ``out_scale`` shrinks the decoder output layer
    so the first reconstructions sit at the output bias.
    """
    rng = np.random.default_rng([seed, 7])
    tensors = {}
    shapes = arch.layer_shapes()
    last_enc = max(k for k in shapes if k.startswith("enc") and k.endswith(".W"))
    last_dec = max(k for k in shapes if k.startswith("dec") and k.endswith(".W"))
    for name, shape in shapes.items():
        if name == "in.scale":
            tensors[name] = np.ones(shape)
            continue
        if zero or name.endswith(".b") or name == "in.shift":
            tensors[name] = np.zeros(shape)
            continue
        scale = np.sqrt(2.0 / shape[0])
        if name == last_enc:
            scale *= last_scale
        elif name == last_dec:
            scale *= out_scale
        tensors[name] = rng.standard_normal(shape) * scale
    if not zero:
        tensors[last_enc[:-1] + "b"][arch.latent_dim :] = logvar_bias
    # float32-representable from the start so checkpoints are lossless
    return VaeParams(arch, {k: v.astype(np.float32).astype(np.float64) for k, v in tensors.items()})


# ------------------------------------------------------------------ grid maps


def pool_flat(arch: Architecture, x: np.ndarray) -> np.ndarray:
    """(B, *input_dims) -> (B, n_visible) by repeated 2x mean pooling."""
    out = np.asarray(x, dtype=np.float64)
    for _ in range(arch.pool):
        b, nx, ny, nz = out.shape
        out = out.reshape(b, nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(2, 4, 6))
    return out.reshape(out.shape[0], -1)


def upsample_flat(arch: Architecture, y: np.ndarray) -> np.ndarray:
    """(B, n_visible) -> (B, *input_dims) by voxel replication."""
    out = y.reshape((y.shape[0],) + arch.pooled_dims)
    f = 2**arch.pool
    for axis in (1, 2, 3):
        out = np.repeat(out, f, axis=axis)
    return out


def _block_sum(arch: Architecture, g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`upsample_flat`."""
    f = 2**arch.pool
    b = g.shape[0]
    px, py, pz = arch.pooled_dims
    return g.reshape(b, px, f, py, f, pz, f).sum(axis=(2, 4, 6)).reshape(b, -1)


def _stack(arch: Architecture, volumes: Sequence[Volume]) -> np.ndarray:
    arrs = []
    for v in volumes:
        if v.dims != arch.input_dims:
            raise VolumeError(f"volume dims {v.dims} do not match model input {arch.input_dims}")
        arrs.append(np.asarray(v.data, dtype=np.float64))
    return np.stack(arrs)


# -------------------------------------------------------------------- forward


def encode_batch(params: VaeParams, x_vis: np.ndarray, cache: Optional[list] = None):
    """Return (mu, logvar) for pooled, flattened inputs."""
    arch = params.arch
    act, _ = _ACTIVATIONS[arch.encoder_activation]
    h = (x_vis - params.tensors["in.shift"]) * params.tensors["in.scale"]
    if cache is not None:
        cache.append((x_vis, h))
    layers = params.layers("enc")
    for i, (W, b) in enumerate(layers):
        a = h @ W + b
        if cache is not None:
            cache.append((h, a))
        h = a if i == len(layers) - 1 else act(a, arch.leaky_slope)
    d = arch.latent_dim
    return h[:, :d], h[:, d:]


FROZEN = ("in.shift", "in.scale")


def decode_batch(params: VaeParams, z: np.ndarray, cache: Optional[list] = None) -> np.ndarray:
    """Return decoder outputs on the pooled grid, in (0, 1)."""
    arch = params.arch
    act, _ = _ACTIVATIONS[arch.decoder_activation]
    h = z
    layers = params.layers("dec")
    for i, (W, b) in enumerate(layers):
        a = h @ W + b
        if cache is not None:
            cache.append((h, a))
        h = _sigmoid(a) if i == len(layers) - 1 else act(a, arch.leaky_slope)
    return h


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def encode(params: VaeParams, x: Volume) -> LatentStats:
    mu, logvar = encode_batch(params, pool_flat(params.arch, _stack(params.arch, [x])))
    return LatentStats(mu[0], np.exp(0.5 * logvar[0]))


def encode_many(params: VaeParams, volumes: Sequence[Volume], batch: int = 32) -> np.ndarray:
    """Posterior means, one row per volume."""
    rows = []
    for i in range(0, len(volumes), batch):
        x = pool_flat(params.arch, _stack(params.arch, volumes[i : i + batch]))
        rows.append(encode_batch(params, x)[0])
    return np.concatenate(rows) if rows else np.zeros((0, params.arch.latent_dim))


def reparameterize(stats: LatentStats, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal(stats.mu.shape)
    return stats.mu + stats.sigma * eps


def decode(params: VaeParams, z: np.ndarray) -> Volume:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.arch.latent_dim,):
        raise ModelError(f"latent vector must have length {params.arch.latent_dim}")
    y = decode_batch(params, z[None, :])
    return Volume(upsample_flat(params.arch, y)[0], params.arch.spacing_mm)


def reconstruct_batch(params: VaeParams, volumes: Sequence[Volume], batch: int = 32) -> List[Volume]:
    """Decode the posterior mean of every volume (no sampling)."""
    out = []
    for i in range(0, len(volumes), batch):
        chunk = volumes[i : i + batch]
        mu, _ = encode_batch(params, pool_flat(params.arch, _stack(params.arch, chunk)))
        y = upsample_flat(params.arch, decode_batch(params, mu))
        out.extend(Volume(y[j], v.spacing) for j, v in enumerate(chunk))
    return out


def kl_divergence(stats: LatentStats) -> float:
    """KL(N(mu, sigma^2) || N(0, I))."""
    s2 = stats.sigma**2
    return float(0.5 * np.sum(s2 + stats.mu**2 - np.log(s2) - 1.0))


# ------------------------------------------------------------------- backward


@dataclass
class LossTerms:
    loss: float
    mse: float
    kl: float


def elbo_loss_batch(
    params: VaeParams,
    x_work: np.ndarray,
    eps: np.ndarray,
    kl_weight: float = 1.0,
    with_grad: bool = True,
):
    """Mean over the batch of MSE(x, x_hat) + kl_weight * KL, and its gradient.

    ``x_work`` holds inputs on the working grid (B, *input_dims); ``eps`` the
    standard-normal draws of the reparameterization (B, latent_dim).
    """
    arch = params.arch
    n_batch = x_work.shape[0]
    n_work = int(np.prod(arch.input_dims))
    with np.errstate(over="raise", invalid="raise"):
        try:
            enc_cache, dec_cache = [], []
            mu, logvar = encode_batch(params, pool_flat(arch, x_work), enc_cache)
            sigma = np.exp(0.5 * logvar)
            z = mu + sigma * eps
            y = decode_batch(params, z, dec_cache)
            diff = x_work.reshape(n_batch, -1) - upsample_flat(arch, y).reshape(n_batch, -1)
            mse_each = np.mean(diff * diff, axis=1)
            kl_each = 0.5 * np.sum(sigma**2 + mu**2 - logvar - 1.0, axis=1)
        except FloatingPointError as exc:
            raise NumericalOverflowError(f"numerical overflow in forward pass: {exc}") from None
    terms = LossTerms(
        float(np.mean(mse_each + kl_weight * kl_each)), float(mse_each.mean()), float(kl_each.mean())
    )
    if not with_grad:
        return terms, None

    grads: Dict[str, np.ndarray] = {}
    up_grad = (-2.0 / (n_work * n_batch)) * diff.reshape((n_batch,) + arch.input_dims)
    dy = _block_sum(arch, up_grad) if arch.pool else up_grad.reshape(n_batch, -1)
    _, dact = _ACTIVATIONS[arch.decoder_activation]
    dec = params.layers("dec")
    g = dy * y * (1.0 - y)
    for i in range(len(dec) - 1, -1, -1):
        h, a = dec_cache[i]
        if i != len(dec) - 1:
            g = g * dact(a, arch.leaky_slope)
        grads[f"dec{i}.W"] = h.T @ g
        grads[f"dec{i}.b"] = g.sum(axis=0)
        g = g @ dec[i][0].T
    dz = g
    scale = kl_weight / n_batch
    dmu = dz + scale * mu
    dlogvar = dz * eps * 0.5 * sigma + scale * 0.5 * (sigma**2 - 1.0)
    g = np.concatenate([dmu, dlogvar], axis=1)
    _, dact = _ACTIVATIONS[arch.encoder_activation]
    enc = params.layers("enc")
    for i in range(len(enc) - 1, -1, -1):
        h, a = enc_cache[i + 1]
        if i != len(enc) - 1:
            g = g * dact(a, arch.leaky_slope)
        grads[f"enc{i}.W"] = h.T @ g
        grads[f"enc{i}.b"] = g.sum(axis=0)
        g = g @ enc[i][0].T
    x_vis, h = enc_cache[0]
    grads["in.shift"] = -params.tensors["in.scale"][0] * g.sum(axis=0)
    grads["in.scale"] = np.array([np.sum(g * (x_vis - params.tensors["in.shift"]))])
    return terms, {k: grads[k] for k in params.tensors}


def elbo_loss(params: VaeParams, x: Volume, rng: np.random.Generator, kl_weight: float = 1.0):
    """Single-image loss and gradients with noise drawn from ``rng``."""
    x_work = _stack(params.arch, [x])
    eps = rng.standard_normal((1, params.arch.latent_dim))
    return elbo_loss_batch(params, x_work, eps, kl_weight)
