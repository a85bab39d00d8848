"""
Diagonal Gaussians over latent points and the dynamical-prior factorization.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import torch

from sgplvm.core.exceptions import ShapeError
from sgplvm.numerics.kron import jittered_cholesky


@dataclass(frozen=True)
class LatentGaussian:
    """
    Diagonal Gaussian over n latent points.

    Attributes:
        mean: n x d
        variance: n x d, non-negative
    """

    mean: torch.Tensor
    variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.variance.shape:
            raise ShapeError(
                f"latent mean {tuple(self.mean.shape)} and variance {tuple(self.variance.shape)} differ"
            )

    def sample(self, n_samples: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Draw n_samples x n x d samples."""
        eps = torch.randn(n_samples, *self.mean.shape, dtype=self.mean.dtype, generator=generator)
        return self.mean + eps * self.variance.clamp_min(0.0).sqrt()

    def detach(self) -> "LatentGaussian":
        return LatentGaussian(self.mean.detach(), self.variance.detach())


def temporal_gram(temporal, timestamps: torch.Tensor, jitter: float) -> torch.Tensor:
    """K_xx on the training timestamps with diagonal jitter."""
    t = timestamps.reshape(-1, 1)
    return temporal.matrix(t) + jitter * torch.eye(t.shape[0], dtype=t.dtype)


def precision_factor(K: torch.Tensor, lam: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Cholesky factors of B_j = I + Λ_j^½ K Λ_j^½ for every latent dimension.

    Args:
        K: n x n temporal Gram matrix
        lam: n x d diagonals of Λ

    Returns:
        (sqrt of Λ as d x n, lower Cholesky factors as d x n x n)
    """
    s = lam.mT.clamp_min(0.0).sqrt()
    n = K.shape[0]
    B = torch.eye(n, dtype=K.dtype) + s[:, :, None] * K[None] * s[:, None, :]
    return s, jittered_cholesky(B, 0.0, name="dynamical posterior precision")
