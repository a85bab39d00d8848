"""
Variational posteriors over the latent inputs.

iid mode stores per-entry means and log variances. Dynamical mode stores the
reparameterized means μ̄ (posterior mean K_xx μ̄) and the log diagonal of Λ,
one column per latent dimension, with posterior covariance (K_xx⁻¹ + Λ_j)⁻¹.
"""
import math
from typing import Optional

import torch
from torch import nn

from sgplvm.core.exceptions import InputError, ShapeError
from sgplvm.numerics.gaussian import LatentGaussian, precision_factor, temporal_gram


class VariationalLatent(nn.Module):
    """
    q(X) for the n_ξ latent points.

    Attributes:
        mode: "iid" or "dynamical"
        mu: n x d means (iid) or μ̄ (dynamical)
        log_var: n x d log variances (iid only)
        log_lambda: n x d log diagonals of Λ (dynamical only)
        timestamps: strictly increasing times (dynamical only)
    """

    def __init__(
        self,
        mu: torch.Tensor,
        log_var: Optional[torch.Tensor] = None,
        log_lambda: Optional[torch.Tensor] = None,
        timestamps: Optional[torch.Tensor] = None,
    ):
        super().__init__()
        mu = torch.as_tensor(mu, dtype=torch.float64)
        if mu.dim() != 2:
            raise ShapeError(f"latent means must be n x d, got {tuple(mu.shape)}")
        self.mu = nn.Parameter(mu.clone(memory_format=torch.contiguous_format))

        if log_lambda is not None:
            self.mode = "dynamical"
            if timestamps is None:
                raise InputError("dynamical latent posterior needs timestamps")
            timestamps = torch.as_tensor(timestamps, dtype=torch.float64).reshape(-1)
            if timestamps.shape[0] != mu.shape[0]:
                raise ShapeError(f"{timestamps.shape[0]} timestamps for {mu.shape[0]} latent points")
            if timestamps.numel() > 1 and not bool(torch.all(timestamps[1:] > timestamps[:-1])):
                raise InputError("timestamps must be strictly increasing")
            self.log_lambda = nn.Parameter(self._as_param(log_lambda, mu))
            self.log_var = None
            self.register_buffer("timestamps", timestamps.clone())
        else:
            self.mode = "iid"
            if log_var is None:
                log_var = torch.full_like(mu, math.log(0.1))
            self.log_var = nn.Parameter(self._as_param(log_var, mu))
            self.log_lambda = None
            self.register_buffer("timestamps", None)

    @staticmethod
    def _as_param(value, mu: torch.Tensor) -> torch.Tensor:
        value = torch.as_tensor(value, dtype=torch.float64)
        if value.shape != mu.shape:
            raise ShapeError(f"expected {tuple(mu.shape)} variational parameters, got {tuple(value.shape)}")
        return value.clone()

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    @property
    def is_dynamical(self) -> bool:
        return self.mode == "dynamical"

    @property
    def lam(self) -> torch.Tensor:
        return torch.exp(self.log_lambda)

    def marginals(self, temporal: Optional[nn.Module] = None, jitter: float = 1e-6) -> LatentGaussian:
        """
        Per-point diagonal Gaussian marginals.

        Raises:
            InputError: In dynamical mode without a temporal kernel
        """
        if not self.is_dynamical:
            return LatentGaussian(self.mu, torch.exp(self.log_var))
        if temporal is None:
            raise InputError("dynamical marginals need the temporal kernel")
        K = temporal_gram(temporal, self.timestamps, jitter)
        s, L = precision_factor(K, self.lam)
        V = torch.linalg.solve_triangular(L, s[:, :, None] * K[None], upper=False)
        var = K.diagonal()[None, :] - V.square().sum(1)
        return LatentGaussian(K @ self.mu, var.mT.clamp_min(0.0))

    def extra_repr(self) -> str:
        return f"mode={self.mode}, n={self.n}, dim={self.dim}"
