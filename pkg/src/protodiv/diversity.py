"""Prototype diversity penalty.

Each prototype of a class induces a categorical distribution over the spatial
locations currently assigned to that class (softmax of cosine similarities
between location features and the projected prototype). Pairs of prototypes
within a class are compared by symmetric KL divergence; an exponentially
decaying penalty of that divergence, averaged over pairs and then over valid
classes, is high exactly when prototypes collapse onto the same locations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .prototypes import PrototypeBank, cosine_normalize

# probabilities are clamped to [KL_EPS, 1] and renormalized before any log
KL_EPS = 1.0e-8


@dataclass
class ClassRegion:
    """Feature vectors at the locations assigned to one class.

    ``locations`` keeps (sample, row, col) indices on the feature grid for
    inspection; the loss itself only consumes ``features``.
    """

    class_id: int
    features: torch.Tensor  # (n, d)
    locations: torch.Tensor  # (n, 3) int64


def class_regions_from_cam(fused_cam, mask, features, num_classes):
    """Assign feature-grid cells to classes from the fused CAM decisions.

    A full-resolution cell belongs to class c when c wins the argmax over
    classes and the cell passes that class's FG threshold. Decisions are
    mapped to the feature grid by nearest-neighbor and pooled over the batch.
    Classes with no surviving cells are omitted.

    ``fused_cam`` is (B, C, H_f, W_f), ``mask`` the matching
    :class:`~protodiv.refiner.PseudoMask`, ``features`` the chosen encoder
    stage (B, d, H_s, W_s).
    """
    cam = fused_cam.cam if hasattr(fused_cam, "cam") else fused_cam
    with torch.no_grad():
        winner = cam.argmax(dim=1)  # (B, H_f, W_f)
        passed = mask.fg.gather(1, winner.unsqueeze(1)).squeeze(1)  # (B, H_f, W_f)
        grid = features.shape[-2:]
        winner_small = (
            F.interpolate(winner[:, None].float(), size=grid, mode="nearest").long().squeeze(1)
        )
        passed_small = (
            F.interpolate(passed[:, None].float(), size=grid, mode="nearest").squeeze(1) > 0.5
        )
    regions = []
    for c in range(num_classes):
        select = (winner_small == c) & passed_small
        if not select.any():
            continue
        locations = select.nonzero()  # (n, 3): sample, row, col
        feats = features[locations[:, 0], :, locations[:, 1], locations[:, 2]]
        regions.append(ClassRegion(class_id=c, features=feats, locations=locations))
    return regions


def prototype_distribution(region: ClassRegion, prototype: torch.Tensor) -> torch.Tensor:
    """Softmax over the region of cosine similarity to one projected prototype."""
    if region.features.shape[0] < 1:
        raise ValueError("region must contain at least one location")
    f_hat = cosine_normalize(region.features, dim=1)
    p_hat = cosine_normalize(prototype.to(f_hat.dtype), dim=0)
    return torch.softmax(f_hat @ p_hat, dim=0)


def _clamp_renorm(p):
    p = p.clamp(min=KL_EPS, max=1.0)
    return p / p.sum()


def jeffrey_divergence(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Symmetric KL divergence of two categorical distributions.

    Entries are clamped to [1e-8, 1] and renormalized first, so the value
    stays finite (and differentiable) at zero mass.
    """
    if u.shape != v.shape:
        raise ValueError(f"distributions differ in support: {u.shape} vs {v.shape}")
    u = _clamp_renorm(u)
    v = _clamp_renorm(v)
    log_ratio = u.log() - v.log()
    return (u * log_ratio).sum() + (v * -log_ratio).sum()


def class_diversity(distributions) -> torch.Tensor:
    """Mean exp(-J) over unordered pairs of one class's distributions.

    Values lie in (0, 1]; identical distributions give exactly 1. A single
    distribution has no pairs and contributes 0.
    """
    k = len(distributions)
    if k < 2:
        return distributions[0].new_zeros(()) if distributions else torch.zeros(())
    terms = [
        torch.exp(-jeffrey_divergence(distributions[u], distributions[v]))
        for u in range(k)
        for v in range(u + 1, k)
    ]
    # sorting fixes the reduction order, so reordering prototypes cannot move
    # the mean by even an ulp
    return torch.sort(torch.stack(terms)).values.mean()


def diversity_loss(regions, bank: PrototypeBank, head_stage: int = 4) -> torch.Tensor:
    """Class-averaged diversity penalty over the valid class regions.

    Each class's prototypes are projected to the feature dimension through
    the configured stage head, turned into spatial distributions over that
    class's region, and scored by :func:`class_diversity`. Classes need at
    least two prototypes to form pairs; with no valid classes the loss is 0.
    """
    if bank.k < 2:
        return bank.P.new_zeros(())
    terms = []
    for region in regions:
        if region.features.shape[0] < 1:
            continue
        rows = bank.projected(head_stage - 1)[bank.class_rows(region.class_id)]  # (k, d)
        distributions = [prototype_distribution(region, rows[u]) for u in range(bank.k)]
        terms.append(class_diversity(distributions))
    if not terms:
        return bank.P.new_zeros(())
    return torch.stack(terms).mean()
