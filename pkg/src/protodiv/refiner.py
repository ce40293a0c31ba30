"""Pseudo-mask generation and foreground/background contrastive alignment.

Stage CAMs are fused into a single map at the finest stage resolution, and a
per-image, per-class dynamic threshold (a fraction of the map's maximum) turns
the fused map into binary foreground/background pseudo masks. Masked regions
are cropped, embedded by a frozen region encoder, projected into the
prototype space, and pulled toward same-class prototypes while being pushed
from the hardest other-class prototypes.
"""

from __future__ import annotations

import abc
import hashlib
import struct
import subprocess
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .prototypes import PrototypeBank, cosine_normalize


class RegionEncoderError(RuntimeError):
    """Recoverable failure of an external region-encoder adapter."""


@dataclass
class FusedCam:
    """Fused class CAM (B, C, H_f, W_f) plus the normalized stage weights."""

    cam: torch.Tensor
    weights: torch.Tensor


@dataclass
class PseudoMask:
    """Binary FG/BG maps from dynamic thresholding of a fused CAM."""

    fg: torch.Tensor  # (B, C, H_f, W_f) bool
    threshold: torch.Tensor  # (B, C)
    alpha: float

    @property
    def bg(self):
        return ~self.fg


@dataclass
class RegionBatch:
    """Cropped FG/BG patches with their sample and class provenance."""

    fg_patches: list = field(default_factory=list)  # each (3, h, w)
    fg_classes: list = field(default_factory=list)
    fg_samples: list = field(default_factory=list)
    bg_patches: list = field(default_factory=list)
    bg_samples: list = field(default_factory=list)

    @property
    def fg_empty(self):
        return len(self.fg_patches) == 0

    @property
    def bg_empty(self):
        return len(self.bg_patches) == 0


@dataclass
class RegionEmbeddings:
    """Frozen-encoder embeddings for FG/BG regions."""

    fg: torch.Tensor  # (N_fg, d_emb)
    fg_classes: torch.Tensor  # (N_fg,) int64
    bg: torch.Tensor  # (N_bg, d_emb)


@dataclass
class ContrastiveResult:
    loss: torch.Tensor
    num_fg: int
    num_bg: int
    fg_empty: bool


def fuse_cams(per_class, weights) -> FusedCam:
    """Weighted sum of stage CAMs, bilinearly resampled to stage-1 resolution."""
    weights = torch.as_tensor(weights, dtype=per_class[0].dtype)
    if weights.numel() != len(per_class):
        raise ValueError(f"expected {len(per_class)} fusion weights, got {weights.numel()}")
    if (weights < 0).any():
        raise ValueError("fusion weights must be nonnegative")
    total = weights.sum()
    if total <= 0:
        raise ValueError("fusion weights must not all be zero")
    weights = weights / total
    target = per_class[0].shape[-2:]
    cam = None
    for w, g in zip(weights, per_class):
        up = g if g.shape[-2:] == tuple(target) else F.interpolate(
            g, size=target, mode="bilinear", align_corners=False
        )
        cam = w * up if cam is None else cam + w * up
    return FusedCam(cam=cam, weights=weights)


def threshold(cam, alpha: float) -> PseudoMask:
    """Dynamic per-image, per-class thresholding of a fused CAM.

    The threshold is ``alpha`` times the spatial maximum of the (nonnegative
    part of the) map, computed independently for every (image, class) pair;
    pixels at or above it are foreground. Clamping at zero keeps the FG area
    monotone in ``alpha`` even for maps that dip below zero.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    values = cam.cam if isinstance(cam, FusedCam) else cam
    pos = values.clamp_min(0.0)
    t = alpha * pos.amax(dim=(-2, -1))  # (B, C)
    fg = pos >= t[..., None, None]
    return PseudoMask(fg=fg, threshold=t, alpha=float(alpha))


def resize_mask(mask, size):
    """Nearest-neighbor resampling of a boolean mask stack to ``size``."""
    return F.interpolate(mask.float(), size=size, mode="nearest") > 0.5


def _bounding_box(mask_2d):
    rows = torch.where(mask_2d.any(dim=1))[0]
    cols = torch.where(mask_2d.any(dim=0))[0]
    return rows[0].item(), rows[-1].item() + 1, cols[0].item(), cols[-1].item() + 1


def _extents(mask_2d, per_component):
    if not mask_2d.any():
        return []
    if not per_component:
        return [mask_2d]
    from scipy import ndimage

    labeled, count = ndimage.label(mask_2d.cpu().numpy())
    labeled = torch.from_numpy(labeled).to(mask_2d.device)
    return [labeled == i for i in range(1, count + 1)]


def extract_regions(image, mask: PseudoMask, classes=None, per_component=False) -> RegionBatch:
    """Crop masked FG and BG regions out of the input images.

    A patch is the image with the complementary pixels zeroed, cropped to the
    region's bounding box. ``classes`` optionally restricts which class
    channels are processed per sample (e.g. to the image-level labels).
    ``per_component`` splits each mask into connected extents instead of one
    crop per mask.
    """
    b, _, h, w = image.shape
    fg_full = resize_mask(mask.fg, (h, w))  # (B, C, H, W)
    num_classes = fg_full.shape[1]
    batch = RegionBatch()
    for i in range(b):
        class_ids = range(num_classes) if classes is None else classes[i]
        for c in class_ids:
            fg_mask = fg_full[i, c]
            for extent in _extents(fg_mask, per_component):
                r0, r1, c0, c1 = _bounding_box(extent)
                patch = (image[i] * extent.to(image.dtype))[:, r0:r1, c0:c1]
                batch.fg_patches.append(patch)
                batch.fg_classes.append(int(c))
                batch.fg_samples.append(i)
            bg_mask = ~fg_mask
            for extent in _extents(bg_mask, per_component):
                r0, r1, c0, c1 = _bounding_box(extent)
                patch = (image[i] * extent.to(image.dtype))[:, r0:r1, c0:c1]
                batch.bg_patches.append(patch)
                batch.bg_samples.append(i)
    return batch


class RegionEncoder(abc.ABC):
    """Frozen patch embedder. Outputs carry no gradients by contract."""

    embed_dim: int

    @abc.abstractmethod
    def encode(self, patches) -> torch.Tensor:
        """Embed a sequence of (3, h, w) patches into (N, embed_dim)."""


class HashedStubEncoder(RegionEncoder):
    """Deterministic stand-in for a pretrained region encoder.

    Patches are resampled to a fixed square size and passed through a fixed
    random projection whose weights are seeded from a hash of the
    configuration. The last embedding coordinate is the mean absolute pixel
    value, so any nonzero patch maps to a nonzero embedding.
    """

    def __init__(self, embed_dim: int = 48, input_size: int = 16, seed: int = 0):
        if embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        self.embed_dim = int(embed_dim)
        self.input_size = int(input_size)
        self.seed = int(seed)
        digest = hashlib.sha256(
            f"protodiv-stub-encoder:{self.embed_dim}:{self.input_size}:{self.seed}".encode()
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        n_in = 3 * self.input_size * self.input_size
        self.weight = rng.standard_normal((self.embed_dim - 1, n_in)).astype(np.float64)
        self.weight /= np.sqrt(n_in)

    def encode(self, patches) -> torch.Tensor:
        if len(patches) == 0:
            return torch.zeros(0, self.embed_dim)
        rows = []
        with torch.no_grad():
            for patch in patches:
                resized = F.interpolate(
                    patch[None].double(),
                    size=(self.input_size, self.input_size),
                    mode="bilinear",
                    align_corners=False,
                )
                flat = resized.reshape(-1).numpy()
                feats = np.tanh(self.weight @ flat)
                row = np.concatenate([feats, [np.abs(flat).mean()]])
                rows.append(row)
        return torch.from_numpy(np.stack(rows)).float()


PROTOCOL_MAGIC = b"RENC"
PROTOCOL_VERSION = 1


class SubprocessEncoderAdapter(RegionEncoder):
    """Adapter running an external region encoder as a subprocess.

    Wire protocol (little-endian throughout), one request per ``encode``:

      request:  b"RENC" | u32 version | u32 N | u32 C | u32 H | u32 W
                | float32[N*C*H*W] patch data
      response: b"RENC" | u32 version | u32 N | u32 D | float32[N*D]

    Patches are resampled to ``input_size`` before sending. Any protocol or
    process failure raises :class:`RegionEncoderError`.
    """

    def __init__(self, command, embed_dim: int, input_size: int = 16, timeout: float = 60.0):
        self.command = list(command)
        self.embed_dim = int(embed_dim)
        self.input_size = int(input_size)
        self.timeout = float(timeout)

    def encode(self, patches) -> torch.Tensor:
        if len(patches) == 0:
            return torch.zeros(0, self.embed_dim)
        with torch.no_grad():
            stack = torch.stack(
                [
                    F.interpolate(
                        p[None].float(),
                        size=(self.input_size, self.input_size),
                        mode="bilinear",
                        align_corners=False,
                    )[0]
                    for p in patches
                ]
            )
        n, c, h, w = stack.shape
        payload = stack.numpy().astype("<f4").tobytes()
        request = PROTOCOL_MAGIC + struct.pack("<5I", PROTOCOL_VERSION, n, c, h, w) + payload
        try:
            proc = subprocess.run(
                self.command, input=request, capture_output=True, timeout=self.timeout
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise RegionEncoderError(f"region encoder subprocess failed: {exc}") from exc
        if proc.returncode != 0:
            raise RegionEncoderError(
                f"region encoder exited with {proc.returncode}: {proc.stderr.decode(errors='replace')[:500]}"
            )
        out = proc.stdout
        header_size = len(PROTOCOL_MAGIC) + 12
        if len(out) < header_size or out[: len(PROTOCOL_MAGIC)] != PROTOCOL_MAGIC:
            raise RegionEncoderError("region encoder response has a bad magic")
        version, rn, rd = struct.unpack_from("<3I", out, len(PROTOCOL_MAGIC))
        if version != PROTOCOL_VERSION:
            raise RegionEncoderError(f"region encoder protocol version {version} unsupported")
        if rn != n or rd != self.embed_dim:
            raise RegionEncoderError(
                f"region encoder returned shape ({rn}, {rd}), expected ({n}, {self.embed_dim})"
            )
        expected = header_size + 4 * rn * rd
        if len(out) != expected:
            raise RegionEncoderError("region encoder response is truncated")
        emb = np.frombuffer(out[header_size:], dtype="<f4").reshape(rn, rd)
        return torch.from_numpy(emb.astype(np.float32, copy=True))


def region_encode(batch: RegionBatch, encoder: RegionEncoder) -> RegionEmbeddings:
    """Embed the region crops with a frozen encoder; outputs carry no grad."""
    fg = encoder.encode(batch.fg_patches).detach()
    bg = encoder.encode(batch.bg_patches).detach()
    return RegionEmbeddings(
        fg=fg,
        fg_classes=torch.tensor(batch.fg_classes, dtype=torch.int64),
        bg=bg,
    )


def info_nce(pos_logits, neg_logits):
    """Mean InfoNCE over anchors with one softmax per positive.

    ``pos_logits`` is (A, P) and ``neg_logits`` (A, N); each positive competes
    against all N negatives of its anchor:

        loss(a, p) = logsumexp([pos[a, p], neg[a, :]]) - pos[a, p]

    The per-anchor loss is the mean over its positives. With zero negatives
    the softmax is degenerate and the loss is exactly 0.
    """
    a, p = pos_logits.shape
    if neg_logits.shape[0] != a:
        raise ValueError("pos_logits and neg_logits must agree on the anchor dimension")
    if neg_logits.shape[1] == 0:
        return pos_logits.new_zeros(())
    stacked = torch.cat(
        [pos_logits.unsqueeze(-1), neg_logits.unsqueeze(1).expand(a, p, neg_logits.shape[1])],
        dim=-1,
    )  # (A, P, 1 + N)
    loss = torch.logsumexp(stacked, dim=-1) - pos_logits
    return loss.mean()


def _hard_negatives(neg_sims, fraction):
    """Keep the most-similar fraction of negatives per anchor (at least one)."""
    n = neg_sims.shape[1]
    if n == 0:
        return neg_sims
    keep = max(1, int(np.ceil(fraction * n)))
    return torch.topk(neg_sims, k=keep, dim=1).values


def contrastive_alignment(
    embeddings: RegionEmbeddings,
    bank: PrototypeBank,
    projector,
    temperature: float = 0.07,
    hard_fraction: float = 0.5,
) -> ContrastiveResult:
    """FG/BG InfoNCE alignment of region embeddings with the prototype bank.

    FG anchors take their class's k prototypes as positives and the hardest
    other-class foreground prototypes as negatives. BG anchors take the
    background prototype group as positives (a virtual zero-logit positive
    when the bank has none) and the hardest foreground prototypes as
    negatives. Similarities are cosine over the projected embeddings, shared
    temperature across both terms.

    With no FG embeddings the loss is 0 and ``fg_empty`` is flagged.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    num_fg = int(embeddings.fg.shape[0])
    num_bg = int(embeddings.bg.shape[0])
    if num_fg == 0:
        zero = bank.P.new_zeros(())
        return ContrastiveResult(loss=zero, num_fg=0, num_bg=num_bg, fg_empty=True)

    protos = cosine_normalize(bank.P, dim=1)  # (N_p, d_proto)
    c, k = bank.num_classes, bank.k

    def sims(emb):
        anchors = cosine_normalize(projector(emb.to(bank.P.dtype)), dim=1)
        return anchors @ protos.t() / temperature  # (A, N_p)

    fg_sims = sims(embeddings.fg)
    fg_rows = fg_sims[:, : bank.num_foreground_rows].reshape(num_fg, c, k)
    cls = embeddings.fg_classes
    idx = torch.arange(num_fg)
    pos = fg_rows[idx, cls]  # (N_fg, k)
    neg_mask = torch.ones(num_fg, c, dtype=torch.bool)
    neg_mask[idx, cls] = False
    neg = fg_rows[neg_mask].reshape(num_fg, (c - 1) * k) if c > 1 else fg_rows.new_zeros(num_fg, 0)
    loss_fg = info_nce(pos, _hard_negatives(neg, hard_fraction))

    loss_bg = bank.P.new_zeros(())
    if num_bg > 0:
        bg_sims = sims(embeddings.bg)
        bg_neg = _hard_negatives(bg_sims[:, : bank.num_foreground_rows], hard_fraction)
        bg_rows = bank.background_rows()
        if bg_rows is not None:
            bg_pos = bg_sims[:, bg_rows]
        else:
            # no background prototypes: repel-only term via a zero-logit positive
            bg_pos = bg_sims.new_zeros(num_bg, 1)
        loss_bg = info_nce(bg_pos, bg_neg)

    return ContrastiveResult(
        loss=loss_fg + loss_bg, num_fg=num_fg, num_bg=num_bg, fg_empty=False
    )
