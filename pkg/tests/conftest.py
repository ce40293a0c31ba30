import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from protodiv.config import Config


def small_config(**overrides) -> Config:
    """A config sized for fast unit tests: 32x32 inputs, thin encoder."""
    cfg = Config()
    cfg.num_classes = overrides.pop("num_classes", 3)
    cfg.encoder.stage_channels = [8, 12, 16, 20]
    cfg.bank.k = overrides.pop("k", 2)
    cfg.bank.d_proto = overrides.pop("d_proto", 16)
    cfg.trainer.batch_size = 4
    cfg.trainer.epochs = 1
    cfg.trainer.warmup_steps = 0
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


@pytest.fixture
def config():
    return small_config()


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    # tests create their own generators for anything that matters; this just
    # keeps stray torch.randn calls reproducible
    torch.manual_seed(0)
    np.random.seed(0)
