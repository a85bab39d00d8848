"""
Kernel hyperparameter containers.

Positive hyperparameters are stored as logarithms so that every free
parameter is unconstrained for the optimizer.
"""
import math
from typing import Sequence, Union

import torch
from torch import nn

from sgplvm.core.exceptions import InputError
from sgplvm.numerics.kernels import KernelFamily, kernel_diag, kernel_matrix


class KernelSpec(nn.Module):
    """
    Stationary kernel with a variance and one or more lengthscales.

    Attributes:
        family: ard_rbf, matern32 or white
        log_variance: log σ²
        log_lengthscales: log ℓ, one per input dimension or a single shared value
    """

    def __init__(
        self,
        family: Union[str, KernelFamily],
        variance: float = 1.0,
        lengthscales: Union[float, Sequence[float]] = 1.0,
        input_dim: int = 1,
    ):
        super().__init__()
        self.family = KernelFamily(family)
        self.input_dim = int(input_dim)
        lengthscales = torch.as_tensor(lengthscales, dtype=torch.float64).reshape(-1)
        if not variance > 0 or not math.isfinite(variance):
            raise InputError(f"kernel variance must be positive, got {variance}")
        if lengthscales.numel() not in (1, self.input_dim):
            raise InputError(
                f"expected 1 or {self.input_dim} lengthscales, got {lengthscales.numel()}"
            )
        if not bool(torch.all(lengthscales > 0)):
            raise InputError("kernel lengthscales must be positive")

        self.log_variance = nn.Parameter(torch.tensor(math.log(variance), dtype=torch.float64))
        self.log_lengthscales = nn.Parameter(
            torch.log(lengthscales),
            requires_grad=self.family is not KernelFamily.WHITE,
        )

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_variance)

    @property
    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscales)

    @property
    def shared_lengthscale(self) -> bool:
        return self.log_lengthscales.numel() == 1 and self.input_dim > 1

    def matrix(self, X1: torch.Tensor, X2: torch.Tensor = None) -> torch.Tensor:
        return kernel_matrix(self, X1, X2)

    def diag(self, X: torch.Tensor) -> torch.Tensor:
        return kernel_diag(self, X)

    def extra_repr(self) -> str:
        ls = ", ".join(f"{v:.4g}" for v in self.lengthscales.detach().tolist())
        return f"family={self.family.value}, variance={self.variance.item():.4g}, lengthscales=[{ls}]"


class TemporalKernelSpec(KernelSpec):
    """Kernel over one-dimensional time inputs, used by the dynamical prior."""

    def __init__(self, family: Union[str, KernelFamily] = KernelFamily.ARD_RBF,
                 variance: float = 1.0, lengthscale: float = 1.0):
        if KernelFamily(family) is KernelFamily.WHITE:
            raise InputError("the temporal kernel cannot be white")
        super().__init__(family, variance=variance, lengthscales=[lengthscale], input_dim=1)
