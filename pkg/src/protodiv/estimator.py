"""Estimator-style entry point: fit on image-level labels, predict masks.

:class:`PrototypeSegmenter` wraps the config plumbing and the training loop
behind the familiar fit/predict/transform surface, so the model slots into
pipelines and grid searches. Hyperparameters exposed here mirror the config
fields one to one; anything not exposed can be set through ``config``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import Config
from .crf import crf_refine
from .data import Sample
from .metrics import evaluate_label_maps
from .training import Trainer


def _validate_images(X, name="X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"{name} must be (n_samples, 3, H, W), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} must be scaled to [0, 1]")
    return X


def _validate_multihot(y, n_samples: int, num_classes: Optional[int]) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        # integer class ids; lift to one-hot
        if num_classes is None:
            num_classes = int(y.max()) + 1
        onehot = np.zeros((len(y), num_classes), dtype=np.float32)
        onehot[np.arange(len(y)), y.astype(int)] = 1.0
        y = onehot
    y = y.astype(np.float32)
    if y.ndim != 2 or y.shape[0] != n_samples:
        raise ValueError(f"y must be (n_samples, n_classes), got {y.shape}")
    if num_classes is not None and y.shape[1] != num_classes:
        raise ValueError(f"y has {y.shape[1]} classes, expected {num_classes}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("y must be a binary multi-hot matrix")
    return y


class PrototypeSegmenter(BaseEstimator):
    """Weakly supervised semantic segmenter trained from image-level labels.

    Parameters mirror the training config. ``fit`` takes images ``X`` of
    shape (n, 3, H, W) in [0, 1] and multi-hot labels ``y`` of shape (n, C);
    ``predict`` returns per-pixel label maps. ``score`` is mean IoU against
    ground-truth masks, so bigger is better for model selection.
    """

    def __init__(
        self,
        num_classes: int = 4,
        k: int = 3,
        d_proto: int = 64,
        alpha: float = 0.45,
        lambda_sim: float = 0.1,
        lambda_div: float = 0.5,
        learning_rate: float = 1.0e-5,
        weight_decay: float = 0.003,
        batch_size: int = 10,
        epochs: int = 10,
        warmup_steps: Optional[int] = None,
        seed: int = 0,
        use_crf: bool = False,
        config: Optional[dict] = None,
    ):
        self.num_classes = num_classes
        self.k = k
        self.d_proto = d_proto
        self.alpha = alpha
        self.lambda_sim = lambda_sim
        self.lambda_div = lambda_div
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.use_crf = use_crf
        self.config = config

    def _build_config(self) -> Config:
        cfg = Config.from_dict(self.config) if self.config else Config()
        cfg.num_classes = self.num_classes
        cfg.seed = self.seed
        cfg.bank.k = self.k
        cfg.bank.d_proto = self.d_proto
        cfg.refiner.alpha = self.alpha
        cfg.trainer.lambda_sim = self.lambda_sim
        cfg.trainer.lambda_div = self.lambda_div
        cfg.trainer.learning_rate = self.learning_rate
        cfg.trainer.weight_decay = self.weight_decay
        cfg.trainer.batch_size = self.batch_size
        cfg.trainer.epochs = self.epochs
        cfg.trainer.warmup_steps = self.warmup_steps
        cfg.crf.enabled = self.use_crf
        cfg.validate()
        return cfg

    def fit(self, X, y, X_val=None, y_val=None, masks_val=None):
        """Trains on images ``X`` with image-level labels ``y``.

        An optional validation set drives best-checkpoint selection: pass
        ``X_val`` with either pixel masks (``masks_val``, selects on mIoU) or
        labels (``y_val``, selects on classification loss). The best weights
        are restored into the fitted model.
        """
        X = _validate_images(X)
        y = _validate_multihot(y, X.shape[0], self.num_classes)
        cfg = self._build_config()
        train = [
            Sample(id=f"fit_{i:04d}", image=X[i], labels=y[i]) for i in range(X.shape[0])
        ]
        val: Sequence[Sample] = ()
        if X_val is not None:
            X_val = _validate_images(X_val, "X_val")
            if masks_val is not None:
                masks_val = np.asarray(masks_val, dtype=np.int64)
                if masks_val.shape != (X_val.shape[0],) + X_val.shape[2:]:
                    raise ValueError(
                        f"masks_val must be (n_val, H, W) matching X_val, got {masks_val.shape}"
                    )
                dummy = np.zeros(self.num_classes, dtype=np.float32)
                val = [
                    Sample(id=f"val_{i:04d}", image=X_val[i], labels=dummy, mask=masks_val[i])
                    for i in range(X_val.shape[0])
                ]
            elif y_val is not None:
                y_val = _validate_multihot(y_val, X_val.shape[0], self.num_classes)
                val = [
                    Sample(id=f"val_{i:04d}", image=X_val[i], labels=y_val[i])
                    for i in range(X_val.shape[0])
                ]
            else:
                raise ValueError("X_val given without y_val or masks_val")

        trainer = Trainer(cfg, train, val)
        result = trainer.run()
        if val:
            trainer.load_best()
        self.config_ = cfg
        self.model_ = trainer.model
        self.history_ = result.history
        self.val_history_ = result.val_history
        self.n_features_in_ = X.shape[1] * X.shape[2] * X.shape[3]
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities, (n, C, H, W)."""
        check_is_fitted(self, "model_")
        X = _validate_images(X)
        self.model_.eval()
        probs = self.model_.predict_proba(torch.from_numpy(X))
        return probs.numpy()

    def predict(self, X) -> np.ndarray:
        """Per-pixel label maps, (n, H, W) int64. Applies CRF when enabled."""
        probs = self.predict_proba(X)
        if not self.use_crf:
            return probs.argmax(axis=1).astype(np.int64)
        X = np.asarray(X, dtype=np.float64)
        return np.stack(
            [crf_refine(X[i], probs[i], self.config_.crf) for i in range(X.shape[0])]
        )

    def transform(self, X) -> np.ndarray:
        """Fused class activation maps at the model's working resolution."""
        check_is_fitted(self, "model_")
        X = _validate_images(X)
        with torch.no_grad():
            _, _, fused = self.model_.forward_cams(torch.from_numpy(X))
        return fused.cam.numpy()

    def score(self, X, y) -> float:
        """Mean IoU of predicted masks against ground-truth label maps ``y``."""
        preds = self.predict(X)
        gts = np.asarray(y, dtype=np.int64)
        if gts.shape != preds.shape:
            raise ValueError(f"y must be (n, H, W) label maps, got {gts.shape}")
        return evaluate_label_maps(list(preds), list(gts), self.num_classes).miou
