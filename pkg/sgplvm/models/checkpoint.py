"""
Serializable training state.
"""
from dataclasses import dataclass
from typing import Optional

import torch

from sgplvm.models.sgplvm import SgplvmModel


@dataclass
class OptimizerMoments:
    """Adam state flattened in pack() order, so training can resume."""

    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor
    step: int


@dataclass
class Checkpoint:
    """
    A model plus the optimizer state needed to continue training it.

    Attributes:
        model: Model with every parameter, inducing input and standardization
        moments: Adam moments, None after an L-BFGS run
    """

    model: SgplvmModel
    moments: Optional[OptimizerMoments] = None
