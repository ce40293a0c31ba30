"""Learnable prototype bank and prototype-derived class activation maps.

The bank holds k trainable vectors per class (plus an optional background
group) in a shared space, with one affine head per encoder stage adapting that
space to the stage's channel width. Per-pixel cosine similarity against the
projected prototypes gives per-prototype activation maps; attention over each
class's prototypes aggregates them into class CAMs; global average pooling of
the CAMs yields multi-label classification logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import tensorio
from .encoder import FeaturePyramid, NUM_STAGES

# added to vector norms before dividing, so zero vectors stay finite
NORM_EPS = 1.0e-8

BANK_KIND = "prototype-bank"


class PrototypeBank(nn.Module):
    """Trainable prototype matrix plus per-stage projection heads.

    Rows are grouped contiguously by class: rows [c*k, (c+1)*k) belong to
    foreground class c, and when ``background`` is set one extra group of k
    rows follows the foreground classes.
    """

    def __init__(
        self,
        num_classes: int,
        k: int,
        d_proto: int,
        stage_channels,
        background: bool = True,
        tau=(0.1, 0.1, 0.1, 0.1),
        seed: int = 0,
    ):
        super().__init__()
        if num_classes < 1 or k < 1 or d_proto < 1:
            raise ValueError("num_classes, k and d_proto must be >= 1")
        if len(stage_channels) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stage channels")
        tau = tuple(float(t) for t in tau)
        if len(tau) != NUM_STAGES or any(t <= 0 for t in tau):
            raise ValueError("tau must hold 4 positive values")
        self.num_classes = int(num_classes)
        self.k = int(k)
        self.d_proto = int(d_proto)
        self.background = bool(background)

        gen = torch.Generator().manual_seed(int(seed))
        rows = torch.randn(self.num_rows, d_proto, generator=gen)
        rows = rows / rows.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
        self.P = nn.Parameter(rows)
        self.heads = nn.ModuleList(nn.Linear(d_proto, int(d)) for d in stage_channels)
        for head in self.heads:
            fan_in = head.weight.shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                head.weight.uniform_(-bound, bound, generator=gen)
                head.bias.uniform_(-bound, bound, generator=gen)
        self.register_buffer("tau", torch.tensor(tau))

    @property
    def num_rows(self):
        return (self.num_classes + (1 if self.background else 0)) * self.k

    @property
    def num_foreground_rows(self):
        return self.num_classes * self.k

    def class_rows(self, class_id):
        """Row slice of foreground class ``class_id``."""
        if not 0 <= class_id < self.num_classes:
            raise IndexError(f"class {class_id} out of range [0, {self.num_classes})")
        return slice(class_id * self.k, (class_id + 1) * self.k)

    def background_rows(self):
        """Row slice of the background group, or None when disabled."""
        if not self.background:
            return None
        return slice(self.num_classes * self.k, (self.num_classes + 1) * self.k)

    def projected(self, stage: int) -> torch.Tensor:
        """All prototype rows mapped through head ``stage`` (0-based)."""
        return self.heads[stage](self.P)


@dataclass
class ActivationSet:
    """Per-stage prototype maps, class CAMs, and the attention that links them."""

    per_prototype: tuple  # stage i: (B, N_p, H_i, W_i)
    per_class: tuple  # stage i: (B, C, H_i, W_i)
    attention: tuple  # stage i: (B, C, k), rows on the simplex


def cosine_normalize(x, dim):
    return x / (x.norm(dim=dim, keepdim=True) + NORM_EPS)


def similarity_maps(pyramid: FeaturePyramid, bank: PrototypeBank):
    """Temperature-scaled cosine similarity maps, one tensor per stage.

    Stage i output is (B, N_p, H_i, W_i) with values in [-1/tau_i, 1/tau_i].
    """
    maps = []
    for i, feats in enumerate(pyramid):
        proj = bank.projected(i)  # (N_p, d_i)
        if feats.shape[1] != proj.shape[1]:
            raise ValueError(
                f"stage {i + 1}: feature channels {feats.shape[1]} != head output {proj.shape[1]}"
            )
        f_hat = cosine_normalize(feats, dim=1)
        p_hat = cosine_normalize(proj.to(feats.dtype), dim=1)
        sim = torch.einsum("bdhw,nd->bnhw", f_hat, p_hat) / bank.tau[i].to(feats.dtype)
        maps.append(sim)
    return tuple(maps)


def aggregate_class_cams(per_prototype, bank: PrototypeBank):
    """Fold each class's k prototype maps into one CAM per class.

    Attention is parameter-free: softmax over each prototype's spatial-max
    activation, taken per image within its class group. Background rows never
    contribute a CAM channel.

    Returns (per_class, attention) with per-stage entries shaped
    (B, C, H_i, W_i) and (B, C, k).
    """
    cams = []
    attns = []
    c, k = bank.num_classes, bank.k
    for maps in per_prototype:
        b, n_p, h, w = maps.shape
        if n_p != bank.num_rows:
            raise ValueError(f"expected {bank.num_rows} prototype channels, got {n_p}")
        fg = maps[:, : bank.num_foreground_rows].reshape(b, c, k, h, w)
        scores = fg.amax(dim=(-2, -1))  # (B, C, k)
        attn = torch.softmax(scores, dim=-1)
        cams.append(torch.einsum("bckhw,bck->bchw", fg, attn))
        attns.append(attn)
    return tuple(cams), tuple(attns)


def build_activations(pyramid: FeaturePyramid, bank: PrototypeBank) -> ActivationSet:
    per_prototype = similarity_maps(pyramid, bank)
    per_class, attention = aggregate_class_cams(per_prototype, bank)
    return ActivationSet(per_prototype, per_class, attention)


def classification_loss(per_class, targets: torch.Tensor) -> torch.Tensor:
    """Multi-label BCE on globally pooled CAM logits, summed over stages.

    Per stage the reduction is the mean over batch and classes; the four
    stage losses are then added.
    """
    if targets.ndim != 2:
        raise ValueError(f"targets must be (B, C), got {tuple(targets.shape)}")
    if not torch.logical_or(targets == 0, targets == 1).all():
        raise ValueError("targets must be binary (0/1)")
    loss = None
    for cam in per_class:
        if cam.shape[:2] != targets.shape:
            raise ValueError(
                f"CAM batch/class dims {tuple(cam.shape[:2])} do not match targets {tuple(targets.shape)}"
            )
        logits = cam.mean(dim=(-2, -1))  # GAP -> (B, C)
        stage_loss = nn.functional.binary_cross_entropy_with_logits(
            logits, targets.to(logits.dtype), reduction="mean"
        )
        loss = stage_loss if loss is None else loss + stage_loss
    return loss


def save_bank(path, bank: PrototypeBank):
    """Serialize the bank to the versioned tensor container format."""
    tensors = {"P": bank.P.detach().cpu().numpy().astype(np.float32)}
    for i, head in enumerate(bank.heads):
        tensors[f"head{i}.weight"] = head.weight.detach().cpu().numpy().astype(np.float32)
        tensors[f"head{i}.bias"] = head.bias.detach().cpu().numpy().astype(np.float32)
    tensors["tau"] = bank.tau.cpu().numpy().astype(np.float32)
    meta = {
        "num_classes": bank.num_classes,
        "k": bank.k,
        "d_proto": bank.d_proto,
        "background": bank.background,
    }
    tensorio.write_tensors(path, tensors, meta=meta, kind=BANK_KIND)


def load_bank(path) -> PrototypeBank:
    tensors, meta = tensorio.read_tensors(path, expect_kind=BANK_KIND)
    stage_channels = [tensors[f"head{i}.weight"].shape[0] for i in range(NUM_STAGES)]
    bank = PrototypeBank(
        num_classes=meta["num_classes"],
        k=meta["k"],
        d_proto=meta["d_proto"],
        stage_channels=stage_channels,
        background=meta["background"],
        tau=tensors["tau"].tolist(),
    )
    with torch.no_grad():
        bank.P.copy_(torch.from_numpy(tensors["P"]))
        for i, head in enumerate(bank.heads):
            head.weight.copy_(torch.from_numpy(tensors[f"head{i}.weight"]))
            head.bias.copy_(torch.from_numpy(tensors[f"head{i}.bias"]))
    return bank
