"""Optimizers and the deterministic VAE training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..volume import PathLike, Volume
from .vae import FROZEN, Architecture, NumericalOverflowError, VaeParams, _stack, elbo_loss_batch, init_params, pool_flat

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0
    kl_weight: float = 1.0
    # start the decoder output at the logit of the mean training image
    init_output_from_data: bool = True
    init_last_scale: float = 1.0
    init_logvar: float = -6.0
    init_output_scale: float = 0.01

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.kl_weight < 0:
            raise ValueError("learning_rate and kl_weight must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def full_resolution_preset(cls, **overrides) -> "TrainConfig":
        """Full-resolution schedule: 200 epochs, lr 1e-5, batch 8."""
        base = dict(epochs=200, learning_rate=1e-5, batch_size=8, kl_weight=1.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: List[dict]):
        super().__init__(message)
        self.trace = trace


class Adam:
    def __init__(self, params: VaeParams, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: VaeParams, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k in FROZEN:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params.tensors[k] -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: VaeParams, lr: float):
        self.lr = lr

    def step(self, params: VaeParams, grads: Dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if k not in FROZEN:
                params.tensors[k] -= self.lr * g


def make_optimizer(params: VaeParams, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate)
    return Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def evaluate_loss(params: VaeParams, volumes: Sequence[Volume], kl_weight: float) -> Optional[float]:
    """Loss at the posterior mean (zero noise), averaged over ``volumes``."""
    if not volumes:
        return None
    total = 0.0
    for i in range(0, len(volumes), 32):
        x = _stack(params.arch, volumes[i : i + 32])
        eps = np.zeros((x.shape[0], params.arch.latent_dim))
        total += elbo_loss_batch(params, x, eps, kl_weight, with_grad=False)[0].loss * x.shape[0]
    return total / len(volumes)


def round_to_float32(params: VaeParams) -> VaeParams:
    """Quantize weights to what a checkpoint stores, so saved and live models agree."""
    return VaeParams(params.arch, {k: v.astype(np.float32).astype(np.float64) for k, v in params.tensors.items()})


@dataclass
class TrainResult:
    params: VaeParams
    trace: List[dict] = field(default_factory=list)


def train(
    train_volumes: Sequence[Volume],
    cfg: TrainConfig,
    arch: Optional[Architecture] = None,
    val_volumes: Sequence[Volume] = (),
    init: Optional[VaeParams] = None,
) -> TrainResult:
    """Fit a VAE; every random draw comes from streams seeded by ``cfg.rng_seed``."""
    if not train_volumes:
        raise ValueError("training set is empty")
    if arch is None:
        v0 = train_volumes[0]
        arch = Architecture(input_dims=v0.dims, spacing_mm=v0.spacing)
    params = init.copy() if init is not None else init_params(
        arch, cfg.rng_seed, last_scale=cfg.init_last_scale, logvar_bias=cfg.init_logvar,
        out_scale=cfg.init_output_scale)
    x_all = _stack(arch, train_volumes)
    if init is None and cfg.init_output_from_data:
        mean_vis = pool_flat(arch, x_all).mean(axis=0)
        p = np.clip(mean_vis, 1e-4, 1 - 1e-4)
        last = max(k for k in params.tensors if k.startswith("dec") and k.endswith(".b"))
        params.tensors[last] = np.log(p / (1 - p))
        dev = pool_flat(arch, x_all) - mean_vis
        params.tensors["in.shift"] = mean_vis.astype(np.float32).astype(np.float64)
        params.tensors["in.scale"] = np.array([np.float32(1.0 / max(dev.std(), 1e-6))], dtype=np.float64)
    opt = make_optimizer(params, cfg)
    shuffle_rng = np.random.default_rng([cfg.rng_seed, 11])
    noise_rng = np.random.default_rng([cfg.rng_seed, 13])
    n = x_all.shape[0]
    trace: List[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            eps = noise_rng.standard_normal((idx.size, arch.latent_dim))
            try:
                terms, grads = elbo_loss_batch(params, x_all[idx], eps, cfg.kl_weight)
            except NumericalOverflowError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", trace) from None
            if not math.isfinite(terms.loss):
                raise TrainingDiverged(f"epoch {epoch}: loss is {terms.loss}", trace)
            if cfg.learning_rate > 0:
                opt.step(params, grads)
            sums += idx.size * np.array([terms.loss, terms.mse, terms.kl])
        sums /= n
        row = {
            "epoch": epoch,
            "train_loss": float(sums[0]),
            "val_loss": evaluate_loss(params, val_volumes, cfg.kl_weight),
            "mse_term": float(sums[1]),
            "kl_term": float(sums[2]),
        }
        trace.append(row)
        log.debug("epoch %d loss %.6g mse %.6g kl %.4g", epoch, row["train_loss"], row["mse_term"], row["kl_term"])
        if not all(math.isfinite(p.sum()) for p in params.tensors.values()):
            raise TrainingDiverged(f"epoch {epoch}: parameters became non-finite", trace)
    return TrainResult(round_to_float32(params), trace)


def write_loss_trace(trace: Sequence[dict], path: PathLike) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "mse_term", "kl_term"])
        for r in trace:
            w.writerow([
                r["epoch"], repr(r["train_loss"]),
                "" if r["val_loss"] is None else repr(r["val_loss"]),
                repr(r["mse_term"]), repr(r["kl_term"]),
            ])
    return path
