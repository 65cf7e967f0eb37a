"""Reconstruction models: the reference VAE and the identity baseline."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from ..volume import Volume
from .checkpoint import load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingDiverged, TrainResult, train, write_loss_trace
from .vae import (
    Architecture,
    LatentStats,
    ModelError,
    VaeParams,
    decode,
    elbo_loss,
    encode,
    encode_many,
    init_params,
    kl_divergence,
    reconstruct_batch,
    reparameterize,
)


class Reconstructor:
    """Anything that maps an image to its (pseudo-healthy) reconstruction."""

    name = "abstract"
    has_latent = False

    def reconstruct(self, x: Volume) -> Volume:
        return self.reconstruct_many([x])[0]

    def reconstruct_many(self, volumes: Sequence[Volume]) -> List[Volume]:
        raise NotImplementedError

    def latents(self, volumes: Sequence[Volume]) -> Optional[np.ndarray]:
        return None


class VaeModel(Reconstructor):
    name = "vae"
    has_latent = True

    def __init__(self, params: VaeParams):
        self.params = params

    def reconstruct_many(self, volumes):
        return reconstruct_batch(self.params, list(volumes))

    def latents(self, volumes):
        return encode_many(self.params, list(volumes))


class IdentityModel(Reconstructor):
    """Returns its input unchanged: the limit of a skip-connection autoencoder."""

    name = "identity"

    def reconstruct_many(self, volumes):
        return list(volumes)


def identity_baseline() -> IdentityModel:
    return IdentityModel()


def reconstruct(model, x: Volume) -> Volume:
    if isinstance(model, VaeParams):
        model = VaeModel(model)
    return model.reconstruct(x)


__all__ = [
    "Architecture", "IdentityModel", "LatentStats", "ModelError", "Reconstructor", "TrainConfig",
    "TrainResult", "TrainingDiverged", "VaeModel", "VaeParams", "decode", "elbo_loss", "encode",
    "encode_many", "identity_baseline", "init_params", "kl_divergence", "load_checkpoint",
    "reconstruct", "reparameterize", "save_checkpoint", "train", "write_loss_trace",
]
