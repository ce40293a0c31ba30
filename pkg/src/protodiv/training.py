"""Loss composition and the optimization loop.

The total objective is

    L_total = L_cls + lambda_sim * L_sim + lambda_div * L_div

with both lambdas held at zero for the first ``warmup_steps`` optimizer steps
(classification warm-up), so early pseudo masks do not feed garbage regions
into the alignment and diversity terms.

Training is deterministic for a fixed seed: batch order comes from a seeded
numpy generator, every reduction is order-fixed, and log records carry no
timestamps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import Config, TrainerConfig
from .data import Sample
from .diversity import class_regions_from_cam, diversity_loss
from .metrics import evaluate_label_maps
from .model import ProtoCamModel
from .prototypes import classification_loss
from .refiner import contrastive_alignment, extract_regions, region_encode, threshold
from . import tensorio

CHECKPOINT_KIND = "checkpoint"


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


class NonFiniteLossError(RuntimeError):
    """A loss component left the reals; carries the offending values."""

    def __init__(self, step: int, components: Dict[str, float]):
        self.step = step
        self.components = components
        detail = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


@dataclass
class LossRecord:
    step: int
    epoch: int
    loss_cls: float
    loss_sim: float
    loss_div: float
    loss_total: float
    warmup: bool
    grad_norms: Dict[str, float] = field(default_factory=dict)
    num_fg_regions: int = 0
    num_bg_regions: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def total_loss(loss_cls, loss_sim, loss_div, config: TrainerConfig, step: int):
    """Composes the training objective for one step.

    While ``step < config.warmup_steps`` the effective lambdas are zero and
    the result equals ``loss_cls``. A ``warmup_steps`` of ``None`` (the
    trainer resolves it to one epoch) is treated as 0 here.
    """
    components = {
        "loss_cls": _scalar(loss_cls),
        "loss_sim": _scalar(loss_sim),
        "loss_div": _scalar(loss_div),
    }
    if not all(math.isfinite(v) for v in components.values()):
        raise NonFiniteLossError(step, components)
    warmup_steps = config.warmup_steps if config.warmup_steps is not None else 0
    lam_sim, lam_div = (0.0, 0.0) if step < warmup_steps else (config.lambda_sim, config.lambda_div)
    return loss_cls + lam_sim * loss_sim + lam_div * loss_div


def _stack_images(samples: Sequence[Sample], indices) -> torch.Tensor:
    return torch.from_numpy(np.stack([samples[i].image for i in indices]))


def _stack_labels(samples: Sequence[Sample], indices) -> torch.Tensor:
    return torch.from_numpy(np.stack([samples[i].labels for i in indices]))


def _validate_samples(samples: Sequence[Sample], num_classes: int, training: bool):
    if len(samples) == 0:
        raise ValueError("dataset is empty")
    shape = samples[0].image.shape
    for index, sample in enumerate(samples):
        where = f"sample {index} ({sample.id})"
        if sample.image.ndim != 3 or sample.image.shape[0] != 3:
            raise ValueError(f"{where}: image must be (3, H, W), got {sample.image.shape}")
        if sample.image.shape != shape:
            raise ValueError(
                f"{where}: image shape {sample.image.shape} differs from {shape}"
            )
        if sample.labels.shape != (num_classes,):
            raise ValueError(
                f"{where}: labels shape {sample.labels.shape}, expected ({num_classes},)"
            )
        if training and not (sample.labels > 0.5).any():
            raise ValueError(f"{where}: training sample has no positive label")


@dataclass
class TrainResult:
    history: List[LossRecord]
    val_history: List[dict]
    best_epoch: Optional[int]
    best_metric: Optional[float]
    best_metric_name: Optional[str]


class Trainer:
    """Runs the end-to-end loop for one :class:`Config`.

    ``log_path``, when given, receives one JSON line per optimizer step and
    one per validation pass. The best validation checkpoint (mIoU when the
    validation split has masks, classification loss otherwise) is kept in
    memory and written by :meth:`save_best` / returned by :meth:`best_state`.
    """

    def __init__(
        self,
        config: Config,
        train_samples: Sequence[Sample],
        val_samples: Sequence[Sample] = (),
        log_path=None,
        region_encoder=None,
        model: Optional[ProtoCamModel] = None,
    ):
        config.validate()
        _validate_samples(train_samples, config.num_classes, training=True)
        if val_samples:
            _validate_samples(val_samples, config.num_classes, training=False)
        self.config = config
        self.train_samples = list(train_samples)
        self.val_samples = list(val_samples)
        self.model = model if model is not None else ProtoCamModel(config, region_encoder=region_encoder)
        tc = config.trainer
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=tc.learning_rate, weight_decay=tc.weight_decay
        )
        self.steps_per_epoch = math.ceil(len(self.train_samples) / tc.batch_size)
        self.warmup_steps = (
            tc.warmup_steps if tc.warmup_steps is not None else self.steps_per_epoch
        )
        self._shuffle_rng = np.random.Generator(np.random.PCG64(config.seed))
        self.step = 0
        self.epoch = 0
        self.history: List[LossRecord] = []
        self.val_history: List[dict] = []
        self._log_handle = open(log_path, "a") if log_path is not None else None
        self._best: Optional[dict] = None

    # -- stepping -----------------------------------------------------------

    def train_step(self, images: torch.Tensor, labels: torch.Tensor) -> LossRecord:
        self.model.train()
        cfg = self.config
        warm = self.step < self.warmup_steps
        pyramid, acts, fused = self.model.forward_cams(images)
        loss_cls = classification_loss(acts.per_class, labels)

        zero = loss_cls.new_zeros(())
        loss_sim, loss_div = zero, zero
        num_fg = num_bg = 0
        need_regions = not warm and (cfg.trainer.lambda_sim > 0 or cfg.trainer.lambda_div > 0)
        if need_regions:
            with torch.no_grad():
                mask = threshold(fused, cfg.refiner.alpha)
            if cfg.trainer.lambda_sim > 0:
                present = [
                    [int(c) for c in torch.where(labels[i] > 0.5)[0]]
                    for i in range(labels.shape[0])
                ]
                with torch.no_grad():
                    regions = extract_regions(
                        images, mask, classes=present,
                        per_component=cfg.refiner.per_component_crops,
                    )
                    embeddings = region_encode(regions, self.model.region_encoder)
                contrast = contrastive_alignment(
                    embeddings,
                    self.model.bank,
                    self.model.projector,
                    temperature=cfg.refiner.infonce_temperature,
                    hard_fraction=cfg.refiner.hard_negative_fraction,
                )
                loss_sim = contrast.loss
                num_fg, num_bg = contrast.num_fg, contrast.num_bg
            if cfg.trainer.lambda_div > 0:
                features = pyramid[cfg.diversity.stage - 1]
                class_regions = class_regions_from_cam(
                    fused, mask, features, cfg.num_classes
                )
                loss_div = diversity_loss(class_regions, self.model.bank, cfg.diversity.stage)

        loss = total_loss(loss_cls, loss_sim, loss_div, cfg.trainer, self.step)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norms = self._grad_norms()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.trainer.grad_clip)
        self.optimizer.step()

        record = LossRecord(
            step=self.step,
            epoch=self.epoch,
            loss_cls=_scalar(loss_cls),
            loss_sim=_scalar(loss_sim),
            loss_div=_scalar(loss_div),
            loss_total=_scalar(loss),
            warmup=warm,
            grad_norms=grad_norms,
            num_fg_regions=num_fg,
            num_bg_regions=num_bg,
        )
        self.step += 1
        self.history.append(record)
        self._log(record.to_json())
        return record

    def _grad_norms(self) -> Dict[str, float]:
        groups = {
            "encoder": self.model.encoder.parameters(),
            "prototypes": [self.model.bank.P],
            "heads": self.model.bank.heads.parameters(),
            "projector": self.model.projector.parameters(),
        }
        norms = {}
        for name, params in groups.items():
            total = 0.0
            for p in params:
                if p.grad is not None:
                    total += float(p.grad.detach().pow(2).sum())
            norms[name] = math.sqrt(total)
        return norms

    # -- epochs -------------------------------------------------------------

    def run_epoch(self) -> List[LossRecord]:
        order = self._shuffle_rng.permutation(len(self.train_samples))
        bs = self.config.trainer.batch_size
        records = []
        for start in range(0, len(order), bs):
            chunk = order[start : start + bs]
            images = _stack_images(self.train_samples, chunk)
            labels = _stack_labels(self.train_samples, chunk)
            records.append(self.train_step(images, labels))
        self.epoch += 1
        return records

    def run(self) -> TrainResult:
        for _ in range(self.config.trainer.epochs):
            self.run_epoch()
            if self.val_samples:
                self.validate()
        best = self._best or {}
        result = TrainResult(
            history=self.history,
            val_history=self.val_history,
            best_epoch=best.get("epoch"),
            best_metric=best.get("metric"),
            best_metric_name=best.get("metric_name"),
        )
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None
        return result

    # -- validation and checkpoints ------------------------------------------

    @torch.no_grad()
    def validate(self) -> dict:
        self.model.eval()
        bs = self.config.trainer.batch_size
        has_masks = all(s.mask is not None for s in self.val_samples)
        if has_masks:
            preds, gts = [], []
            for start in range(0, len(self.val_samples), bs):
                chunk = range(start, min(start + bs, len(self.val_samples)))
                images = _stack_images(self.val_samples, chunk)
                labels_pred = self.model.predict_labels(images)
                preds.extend(labels_pred.numpy())
                gts.extend(self.val_samples[i].mask for i in chunk)
            seg = evaluate_label_maps(preds, gts, self.config.num_classes)
            entry = {
                "epoch": self.epoch,
                "step": self.step,
                "val_miou": seg.miou,
                "val_mdice": seg.mdice,
            }
            metric, metric_name, better = seg.miou, "val_miou", lambda a, b: a > b
        else:
            total, count = 0.0, 0
            for start in range(0, len(self.val_samples), bs):
                chunk = range(start, min(start + bs, len(self.val_samples)))
                images = _stack_images(self.val_samples, chunk)
                labels = _stack_labels(self.val_samples, chunk)
                _, acts, _ = self.model.forward_cams(images)
                total += float(classification_loss(acts.per_class, labels)) * len(chunk)
                count += len(chunk)
            metric, metric_name = total / count, "val_loss_cls"
            entry = {"epoch": self.epoch, "step": self.step, "val_loss_cls": metric}
            better = lambda a, b: a < b
        self.val_history.append(entry)
        self._log(json.dumps(entry, sort_keys=True))
        if self._best is None or better(metric, self._best["metric"]):
            self._best = {
                "epoch": self.epoch,
                "step": self.step,
                "metric": metric,
                "metric_name": metric_name,
                "state": {
                    k: v.detach().clone() for k, v in self.model.state_dict().items()
                },
            }
        return entry

    def best_state(self) -> Optional[Dict[str, torch.Tensor]]:
        return None if self._best is None else self._best["state"]

    def load_best(self):
        """Restores the best validation weights into the live model."""
        if self._best is not None:
            self.model.load_state_dict(self._best["state"])

    def save_checkpoint(self, path, extra_meta: Optional[dict] = None):
        save_checkpoint(path, self.model, self.config, self.step, self.epoch, extra_meta)

    def save_best(self, path):
        if self._best is None:
            raise RuntimeError("no validation pass has run; nothing to save")
        meta = {
            "best_metric": self._best["metric"],
            "best_metric_name": self._best["metric_name"],
        }
        current = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        self.model.load_state_dict(self._best["state"])
        try:
            save_checkpoint(
                path, self.model, self.config, self._best["step"], self._best["epoch"], meta
            )
        finally:
            self.model.load_state_dict(current)

    def _log(self, line: str):
        if self._log_handle is not None:
            self._log_handle.write(line + "\n")
            self._log_handle.flush()


def save_checkpoint(path, model: ProtoCamModel, config: Config, step: int, epoch: int,
                    extra_meta: Optional[dict] = None):
    """All trainable state plus a config snapshot, in the tensor container."""
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"config": config.to_dict(), "step": step, "epoch": epoch}
    if extra_meta:
        meta.update(extra_meta)
    tensorio.write_tensors(path, tensors, meta=meta, kind=CHECKPOINT_KIND)


def load_checkpoint(path, region_encoder=None):
    """Rebuilds the model a checkpoint was saved from.

    Returns ``(model, meta)``. The stored config snapshot drives
    reconstruction, so architecture changes are caught as key mismatches.
    """
    tensors, meta = tensorio.read_tensors(path, expect_kind=CHECKPOINT_KIND)
    config = Config.from_dict(meta["config"])
    model = ProtoCamModel(config, region_encoder=region_encoder)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    model.load_state_dict(state, strict=True)
    return model, meta
