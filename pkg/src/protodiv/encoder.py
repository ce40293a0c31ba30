"""Multi-scale feature extraction.

The backbone contract is four feature stages at fixed downsampling factors.
``ReferenceEncoder`` is a small convolutional stand-in used at desk scale;
anything implementing :class:`MultiScaleEncoder` (e.g. an adapter around a
pretrained transformer backbone) can be dropped in instead.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import torch
import torch.nn as nn

NUM_STAGES = 4

# per-channel normalization applied on the way in; loaders keep images in [0, 1]
_INPUT_MEAN = (0.5, 0.5, 0.5)
_INPUT_STD = (0.25, 0.25, 0.25)


class EncoderInputError(ValueError):
    """Input image violates the encoder's shape or finiteness contract."""


@dataclass(frozen=True)
class EncoderSpec:
    """Channel and stride layout of the four feature stages."""

    stage_channels: tuple
    stage_strides: tuple

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        if len(self.stage_channels) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stage channels, got {self.stage_channels}")
        if len(self.stage_strides) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stage strides, got {self.stage_strides}")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage channels must be >= 1")
        if any(s < 1 for s in self.stage_strides):
            raise ValueError("stage strides must be >= 1")
        if list(self.stage_strides) != sorted(self.stage_strides):
            raise ValueError("stage strides must be nondecreasing")
        for prev, cur in zip(self.stage_strides, self.stage_strides[1:]):
            if cur % prev != 0:
                raise ValueError("each stage stride must divide the next")

    @property
    def num_stages(self):
        return NUM_STAGES

    def stage_shape(self, stage, height, width):
        s = self.stage_strides[stage]
        return self.stage_channels[stage], height // s, width // s


@dataclass
class FeaturePyramid:
    """Per-stage feature maps, stage i shaped (B, d_i, H/stride_i, W/stride_i)."""

    stages: tuple

    def __post_init__(self):
        self.stages = tuple(self.stages)
        if len(self.stages) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stages, got {len(self.stages)}")

    def __iter__(self):
        return iter(self.stages)

    def __getitem__(self, i):
        return self.stages[i]


class MultiScaleEncoder(nn.Module, abc.ABC):
    """Contract for backbones: image (B, 3, H, W) -> :class:`FeaturePyramid`."""

    spec: EncoderSpec

    @abc.abstractmethod
    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        ...

    def check_input(self, image):
        if image.ndim != 4 or image.shape[1] != 3:
            raise EncoderInputError(f"expected image of shape (B, 3, H, W), got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        largest = self.spec.stage_strides[-1]
        for s in self.spec.stage_strides:
            if h % s or w % s:
                raise EncoderInputError(
                    f"image size {h}x{w} not divisible by stage stride {s} (largest {largest})"
                )
        if not torch.isfinite(image).all():
            raise EncoderInputError("image contains non-finite values")


class ReferenceEncoder(MultiScaleEncoder):
    """Four blocks of strided conv -> GroupNorm -> GELU -> 1x1 projection.

    Deterministic given ``seed``: every parameter is drawn from a dedicated
    generator with fan-in-scaled uniform bounds. GELU keeps the map smooth,
    which the finite-difference gradient checks rely on.
    """

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.register_buffer("input_mean", torch.tensor(_INPUT_MEAN).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(_INPUT_STD).view(1, 3, 1, 1))
        blocks = []
        in_ch = 3
        prev_stride = 1
        for ch, stride in zip(spec.stage_channels, spec.stage_strides):
            rel = stride // prev_stride
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, ch, kernel_size=3, stride=rel, padding=1),
                    nn.GroupNorm(_num_groups(ch), ch),
                    nn.GELU(),
                    nn.Conv2d(ch, ch, kernel_size=1),
                )
            )
            in_ch = ch
            prev_stride = stride
        self.blocks = nn.ModuleList(blocks)
        init_parameters(self, seed)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        self.check_input(image)
        x = (image - self.input_mean) / self.input_std
        stages = []
        for block in self.blocks:
            x = block(x)
            stages.append(x)
        return FeaturePyramid(tuple(stages))


def _num_groups(channels):
    # keep at least 4 channels per group so normalization stays well posed
    # even on 1x1 feature maps
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 4:
            return g
    return 1


def init_parameters(module, seed):
    """Fan-in-scaled uniform init for every conv/linear, from one generator."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.ndim == 4 else 1
            )
            bound = 1.0 / float(fan_in) ** 0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.GroupNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def encode(image, encoder: MultiScaleEncoder) -> FeaturePyramid:
    """Functional alias: run ``encoder`` on ``image`` after contract checks."""
    return encoder(image)
