"""The full trainable network: encoder, prototype bank, region projector."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config
from .encoder import EncoderSpec, ReferenceEncoder
from .prototypes import PrototypeBank, build_activations
from .refiner import HashedStubEncoder, fuse_cams, threshold


class RegionProjector(nn.Module):
    """Affine map from region-embedding space into the prototype space."""

    def __init__(self, embed_dim: int, d_proto: int, seed: int = 0):
        super().__init__()
        self.linear = nn.Linear(embed_dim, d_proto)
        gen = torch.Generator().manual_seed(int(seed))
        bound = 1.0 / math.sqrt(embed_dim)
        with torch.no_grad():
            self.linear.weight.uniform_(-bound, bound, generator=gen)
            self.linear.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, x):
        return self.linear(x)


class ProtoCamModel(nn.Module):
    """Encoder + prototype bank + projector, wired per one :class:`Config`.

    The frozen region encoder is deliberately not a submodule: it holds no
    trainable state and never sees gradients.
    """

    def __init__(self, config: Config, encoder=None, region_encoder=None):
        super().__init__()
        self.config = config
        spec = EncoderSpec(
            stage_channels=tuple(config.encoder.stage_channels),
            stage_strides=tuple(config.encoder.stage_strides),
        )
        self.encoder = encoder if encoder is not None else ReferenceEncoder(spec, seed=config.seed)
        self.bank = PrototypeBank(
            num_classes=config.num_classes,
            k=config.bank.k,
            d_proto=config.bank.d_proto,
            stage_channels=spec.stage_channels,
            background=config.bank.background,
            tau=config.bank.tau,
            seed=config.seed + 1,
        )
        self.projector = RegionProjector(
            embed_dim=config.refiner.region_embed_dim,
            d_proto=config.bank.d_proto,
            seed=config.seed + 2,
        )
        self.region_encoder = (
            region_encoder
            if region_encoder is not None
            else HashedStubEncoder(
                embed_dim=config.refiner.region_embed_dim,
                input_size=config.refiner.region_input_size,
                seed=config.seed,
            )
        )

    def forward_cams(self, images):
        """Run the CAM pipeline: feature pyramid, activations, fused CAM."""
        pyramid = self.encoder(images)
        acts = build_activations(pyramid, self.bank)
        fused = fuse_cams(acts.per_class, self.config.refiner.fusion_weights)
        return pyramid, acts, fused

    @torch.no_grad()
    def predict_proba(self, images):
        """Per-pixel class probabilities at image resolution, (B, C, H, W)."""
        _, _, fused = self.forward_cams(images)
        cam = F.interpolate(
            fused.cam, size=images.shape[-2:], mode="bilinear", align_corners=False
        )
        return torch.softmax(cam, dim=1)

    @torch.no_grad()
    def predict_labels(self, images):
        """Argmax label map at image resolution, (B, H, W) int64."""
        return self.predict_proba(images).argmax(dim=1)

    @torch.no_grad()
    def pseudo_masks(self, images):
        """Fused CAM and thresholded pseudo masks for a batch."""
        _, _, fused = self.forward_cams(images)
        return fused, threshold(fused, self.config.refiner.alpha)
