"""
Small shared helpers: per-channel standardization and seeded random generators.
"""
from typing import Tuple

import numpy as np
import torch


def standardize(y: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Per-channel zero mean and unit variance.

    Channels with zero spread keep a scale of one.

    Returns:
        (standardized y, mean per channel, scale per channel)
    """
    mean = y.mean(0)
    scale = y.std(0, unbiased=False)
    scale = torch.where(scale > 0, scale, torch.ones_like(scale))
    return (y - mean) / scale, mean, scale


def destandardize(y: torch.Tensor, mean: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return y * scale + mean


def destandardize_variance(var: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return var * scale.square()


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))
