"""
Seeding and device selection shared by every command.
"""

import logging
import random

import numpy as np
import torch

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch, and ask torch for deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def resolve_device(name: str) -> torch.device:
    """
    Turn a device name into a torch.device, falling back to cpu when CUDA is missing.

    Args:
        name: "cpu", "cuda" or "cuda:<index>"
    """
    if name.startswith("cuda") and not torch.cuda.is_available():
        logger.warning("CUDA requested but not available, using cpu")
        return torch.device("cpu")
    return torch.device(name)
