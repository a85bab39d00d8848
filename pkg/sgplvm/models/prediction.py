"""
Predictive distributions returned by the prediction and imputation services.
"""
from dataclasses import dataclass
from typing import List, Optional

import torch

from sgplvm.core.exceptions import InputError, ShapeError

VARIANCE_TOLERANCE = 1e-10


@dataclass(frozen=True)
class PredictiveGaussian:
    """
    Gaussian prediction in standardized output units.

    Attributes:
        mean: n* x d_y
        variance: n* x d_y marginal variances, clamped at zero
        covariance: Optional (n_cases, d_y, n_s*, n_s*) blocks, one per test case and channel
    """

    mean: torch.Tensor
    variance: torch.Tensor
    covariance: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.mean.shape != self.variance.shape:
            raise ShapeError(f"mean {tuple(self.mean.shape)} and variance {tuple(self.variance.shape)} differ")
        if self.covariance is not None:
            n_cases, d_y, n_s, n_s2 = self.covariance.shape
            if n_s != n_s2 or d_y != self.mean.shape[1] or n_cases * n_s != self.mean.shape[0]:
                raise ShapeError(
                    f"covariance blocks {tuple(self.covariance.shape)} do not cover mean {tuple(self.mean.shape)}"
                )

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def d_y(self) -> int:
        return self.mean.shape[1]


def clamp_variance(var: torch.Tensor, tolerance: float = VARIANCE_TOLERANCE) -> torch.Tensor:
    """
    Clamp round-off negatives to zero.

    Raises:
        InputError: If a variance is below -tolerance
    """
    if var.numel() and float(var.min()) < -tolerance * max(1.0, float(var.abs().max())):
        raise InputError(f"predictive variance {float(var.min()):.3e} is negative beyond round-off")
    return var.clamp_min(0.0)


@dataclass(frozen=True)
class MixturePrediction:
    """
    Equal-weight mixture of Gaussian predictions, one per latent sample.

    Attributes:
        components: n_MOG PredictiveGaussians over the same points
    """

    components: List[PredictiveGaussian]

    def __post_init__(self):
        if not self.components:
            raise InputError("a mixture needs at least one component")

    @property
    def n_mog(self) -> int:
        return len(self.components)

    def mean(self) -> torch.Tensor:
        return torch.stack([c.mean for c in self.components]).mean(0)

    def variance(self) -> torch.Tensor:
        """Mixture second moment minus the squared mixture mean."""
        means = torch.stack([c.mean for c in self.components])
        second = torch.stack([c.variance for c in self.components]) + means.square()
        return clamp_variance(second.mean(0) - means.mean(0).square())

    def covariance(self) -> torch.Tensor:
        """Mixture covariance blocks with the layout of the component covariances."""
        if any(c.covariance is None for c in self.components):
            raise InputError("mixture components carry no covariance blocks")
        blocks = []
        for c in self.components:
            mu = c.mean.reshape(c.covariance.shape[0], c.covariance.shape[2], c.d_y).permute(0, 2, 1)
            blocks.append(c.covariance + mu[..., :, None] * mu[..., None, :])
        mu_bar = self.mean()
        first = self.components[0]
        mu_bar = mu_bar.reshape(first.covariance.shape[0], first.covariance.shape[2], first.d_y).permute(0, 2, 1)
        cov = torch.stack(blocks).mean(0) - mu_bar[..., :, None] * mu_bar[..., None, :]
        return 0.5 * (cov + cov.mT)

    def summary(self) -> PredictiveGaussian:
        cov = self.covariance() if self.components[0].covariance is not None else None
        return PredictiveGaussian(self.mean(), self.variance(), cov)
