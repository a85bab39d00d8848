"""
Stationary covariance functions: ARD exponentiated quadratic, Matérn 3/2 and white.

Functions take any object exposing ``family``, ``variance`` and
``lengthscales`` (see ``sgplvm.models.kernel.KernelSpec``). A lengthscale
vector of length one is shared by every input dimension.
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Protocol

import torch

from sgplvm.core.exceptions import ShapeError

SQRT3 = math.sqrt(3.0)
_R2_FLOOR = 1e-36


class KernelFamily(str, Enum):
    """Supported kernel families"""
    ARD_RBF = "ard_rbf"
    MATERN32 = "matern32"
    WHITE = "white"


class KernelLike(Protocol):
    family: KernelFamily

    @property
    def variance(self) -> torch.Tensor: ...

    @property
    def lengthscales(self) -> torch.Tensor: ...


@dataclass(frozen=True)
class FixedKernel:
    """Kernel with constant hyperparameters, e.g. a detached view of a trained kernel."""

    family: KernelFamily
    variance: torch.Tensor
    lengthscales: torch.Tensor

    @classmethod
    def frozen(cls, spec: KernelLike) -> "FixedKernel":
        return cls(KernelFamily(spec.family), spec.variance.detach(), spec.lengthscales.detach())

    def matrix(self, X1: torch.Tensor, X2: Optional[torch.Tensor] = None) -> torch.Tensor:
        return kernel_matrix(self, X1, X2)

    def diag(self, X: torch.Tensor) -> torch.Tensor:
        return kernel_diag(self, X)


def _check_inputs(spec: KernelLike, X1: torch.Tensor, X2: torch.Tensor) -> None:
    if X1.dim() != 2 or X2.dim() != 2:
        raise ShapeError(f"kernel inputs must be 2-D, got {tuple(X1.shape)} and {tuple(X2.shape)}")
    if X1.shape[1] != X2.shape[1]:
        raise ShapeError(f"kernel inputs disagree on dimension: {X1.shape[1]} vs {X2.shape[1]}")
    n_ls = spec.lengthscales.shape[0]
    if n_ls not in (1, X1.shape[1]):
        raise ShapeError(
            f"{KernelFamily(spec.family).value} kernel has {n_ls} lengthscales "
            f"but inputs have {X1.shape[1]} dimensions"
        )


def scaled_sq_diffs(X1: torch.Tensor, X2: torch.Tensor, lengthscales: torch.Tensor) -> torch.Tensor:
    """Per-dimension squared scaled differences, shape (n1, n2, d)."""
    diff = (X1[:, None, :] - X2[None, :, :]) / lengthscales
    return diff.square()


def kernel_matrix(spec: KernelLike, X1: torch.Tensor, X2: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Kernel matrix K[i, j] = k(X1[i], X2[j]).

    The white kernel is σ²·I when X2 is omitted or is the same tensor as X1,
    and zero for any other pair of inputs. Callers pass tied inputs by
    identity, never as copies.

    Args:
        spec: Kernel with family, variance and lengthscales
        X1: n1 x d inputs
        X2: n2 x d inputs, defaults to X1

    Returns:
        n1 x n2 kernel matrix

    Raises:
        ShapeError: If the input dimensions disagree with each other or the lengthscales
    """
    same = X2 is None or X2 is X1
    X2 = X1 if X2 is None else X2
    _check_inputs(spec, X1, X2)
    family = KernelFamily(spec.family)
    variance = spec.variance

    if family is KernelFamily.WHITE:
        if same:
            return variance * torch.eye(X1.shape[0], dtype=X1.dtype)
        return torch.zeros(X1.shape[0], X2.shape[0], dtype=X1.dtype) * variance

    r2 = scaled_sq_diffs(X1, X2, spec.lengthscales).sum(-1)
    if family is KernelFamily.ARD_RBF:
        return variance * torch.exp(-0.5 * r2)
    a = SQRT3 * torch.sqrt(r2.clamp_min(_R2_FLOOR))
    return variance * (1.0 + a) * torch.exp(-a)


def kernel_diag(spec: KernelLike, X: torch.Tensor) -> torch.Tensor:
    """k(x_i, x_i) = σ² for every stationary family."""
    if X.dim() != 2:
        raise ShapeError(f"kernel inputs must be 2-D, got {tuple(X.shape)}")
    return spec.variance * torch.ones(X.shape[0], dtype=X.dtype)


def kernel_grad_hyper(
    spec: KernelLike, X1: torch.Tensor, X2: Optional[torch.Tensor] = None
) -> Dict[str, torch.Tensor]:
    """
    Analytic derivatives of the kernel matrix w.r.t. log-hyperparameters.

    Returns:
        {"log_variance": n1 x n2, "log_lengthscales": n_ls x n1 x n2}
    """
    same = X2 is None or X2 is X1
    X2 = X1 if X2 is None else X2
    _check_inputs(spec, X1, X2)
    family = KernelFamily(spec.family)
    n_ls = spec.lengthscales.shape[0]

    with torch.no_grad():
        K = kernel_matrix(spec, X1, X1 if same else X2)
        if family is KernelFamily.WHITE:
            grad_ls = torch.zeros(n_ls, *K.shape, dtype=K.dtype)
            return {"log_variance": K, "log_lengthscales": grad_ls}

        sq = scaled_sq_diffs(X1, X2, spec.lengthscales)
        if family is KernelFamily.ARD_RBF:
            per_dim = K[:, :, None] * sq
        else:
            a = SQRT3 * torch.sqrt(sq.sum(-1).clamp_min(_R2_FLOOR))
            per_dim = (3.0 * spec.variance * torch.exp(-a))[:, :, None] * sq
        if n_ls == 1:
            per_dim = per_dim.sum(-1, keepdim=True)
        return {"log_variance": K, "log_lengthscales": per_dim.permute(2, 0, 1).contiguous()}
