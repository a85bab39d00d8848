"""
The structured Bayesian GP-LVM parameter container.
"""
import logging
import math
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from sgplvm.core.exceptions import InputError, ModelStateError, ShapeError
from sgplvm.models.grid import ObservationGrid
from sgplvm.models.kernel import KernelSpec, TemporalKernelSpec
from sgplvm.models.latent import VariationalLatent
from sgplvm.numerics.bound import (
    BoundWorkspace,
    build_workspace,
    collapsed_bound,
    kl_dynamical,
    kl_iid,
    structured_kuu,
)
from sgplvm.numerics.gaussian import LatentGaussian
from sgplvm.numerics.kernels import KernelFamily
from sgplvm.numerics.kron import KronMatrix, kron_rows, kron_vector
from sgplvm.numerics.psi import StructuredPsiSet, structured_psi

logger = logging.getLogger(__name__)


class SgplvmModel(nn.Module):
    """
    Kernels, inducing inputs, latent posterior and noise precision of an SGPLVM.

    Spatial inducing inputs of a factor are either tied to the training
    coordinates of that factor (m_s = n_s, never optimized) or free.

    Attributes:
        grid: Standardized training data
        latent_kernel: ARD-RBF kernel over the latent space
        spatial_kernels: One kernel per spatial factor
        temporal: Kernel of the dynamical prior, None for the iid prior
        q_latent: Variational posterior over the training latents
        z_xi: m_ξ x d_ξ latent inducing inputs
        log_beta: log noise precision
        y_mean, y_scale: Per-channel standardization
        is_trained: Set once training finished
    """

    def __init__(
        self,
        grid: ObservationGrid,
        latent_kernel: KernelSpec,
        spatial_kernels: Sequence[KernelSpec],
        q_latent: VariationalLatent,
        z_xi: torch.Tensor,
        z_s: Sequence[Optional[torch.Tensor]],
        beta: float,
        temporal: Optional[TemporalKernelSpec] = None,
        jitter: float = 1e-6,
        y_mean: Optional[torch.Tensor] = None,
        y_scale: Optional[torch.Tensor] = None,
        optimize_spatial_inducing: bool = False,
    ):
        super().__init__()
        if latent_kernel.family is not KernelFamily.ARD_RBF:
            raise InputError("the latent kernel must be ard_rbf")
        if len(spatial_kernels) != len(grid.xs_factors) or len(z_s) != len(grid.xs_factors):
            raise ShapeError(
                f"{len(grid.xs_factors)} spatial factors need as many kernels and inducing sets, "
                f"got {len(spatial_kernels)} and {len(z_s)}"
            )
        if q_latent.n != grid.n_xi:
            raise ShapeError(f"q(X) has {q_latent.n} points for {grid.n_xi} latent indices")
        if q_latent.is_dynamical and temporal is None:
            raise InputError("a dynamical latent posterior needs a temporal kernel")
        if not beta > 0:
            raise InputError(f"beta must be positive, got {beta}")

        self.grid = grid
        self.jitter = float(jitter)
        self.latent_kernel = latent_kernel
        self.spatial_kernels = nn.ModuleList(spatial_kernels)
        self.temporal = temporal
        self.q_latent = q_latent
        self.z_xi = nn.Parameter(torch.as_tensor(z_xi, dtype=torch.float64).clone())
        if self.z_xi.shape[1] != q_latent.dim:
            raise ShapeError(f"latent inducing inputs have {self.z_xi.shape[1]} dims, q(X) has {q_latent.dim}")

        self.tied = [z is None for z in z_s]
        self.z_s_free = nn.ParameterList([
            nn.Parameter(torch.as_tensor(z, dtype=torch.float64).clone(),
                         requires_grad=optimize_spatial_inducing)
            for z in z_s if z is not None
        ])
        self.log_beta = nn.Parameter(torch.tensor(math.log(beta), dtype=torch.float64))
        d_y = grid.d_y
        self.register_buffer("y_mean", torch.zeros(d_y, dtype=torch.float64) if y_mean is None
                             else torch.as_tensor(y_mean, dtype=torch.float64).clone())
        self.register_buffer("y_scale", torch.ones(d_y, dtype=torch.float64) if y_scale is None
                             else torch.as_tensor(y_scale, dtype=torch.float64).clone())
        self.is_trained = False
        self._frozen: Optional[BoundWorkspace] = None

    # Shapes

    @property
    def d_xi(self) -> int:
        return self.z_xi.shape[1]

    @property
    def m_xi(self) -> int:
        return self.z_xi.shape[0]

    @property
    def m_s(self) -> Tuple[int, ...]:
        return tuple(z.shape[0] for z in self.z_s)

    @property
    def prior(self) -> str:
        return self.q_latent.mode

    @property
    def z_s(self) -> List[torch.Tensor]:
        """Spatial inducing inputs per factor; tied factors return the training coordinates."""
        free = iter(self.z_s_free)
        return [x if tied else next(free) for x, tied in zip(self.grid.xs_factors, self.tied)]

    @property
    def beta(self) -> torch.Tensor:
        return torch.exp(self.log_beta)

    # Bound

    def latent_marginals(self) -> LatentGaussian:
        return self.q_latent.marginals(self.temporal, self.jitter)

    def kuu(self) -> KronMatrix:
        return structured_kuu(self.latent_kernel, self.z_xi, self.spatial_kernels, self.z_s, self.jitter)

    def structured_psi(self) -> StructuredPsiSet:
        return structured_psi(
            self.latent_marginals(), self.z_xi, self.z_s, self.grid.xs_factors,
            self.latent_kernel, list(self.spatial_kernels),
        )

    def kl(self) -> torch.Tensor:
        if self.q_latent.is_dynamical:
            return kl_dynamical(self.q_latent, self.temporal, self.jitter)
        return kl_iid(self.q_latent)

    def workspace(self, psi: Optional[StructuredPsiSet] = None) -> BoundWorkspace:
        psi = self.structured_psi() if psi is None else psi
        return build_workspace(psi, self.kuu(), self.grid.y, self.beta)

    def elbo(self) -> torch.Tensor:
        """
        Collapsed lower bound at the current parameters.

        Raises:
            NonFiniteBoundError: If a bound term is not finite
            DecompositionError: If K_uu cannot be factorized
        """
        psi = self.structured_psi()
        ws = self.workspace(psi)
        return collapsed_bound(ws, psi.psi0_full, self.grid.y, self.kl())

    def forward(self) -> torch.Tensor:
        return self.elbo()

    def frozen_workspace(self) -> BoundWorkspace:
        """Detached workspace at the current parameters, cached until mark_updated()."""
        if self._frozen is None:
            with torch.no_grad():
                self._frozen = self.workspace()
        return self._frozen

    def mark_updated(self) -> None:
        self._frozen = None

    def require_trained(self) -> None:
        if not self.is_trained:
            raise ModelStateError("the model has not been trained")

    # Spatial blocks for test cases

    def spatial_cross(self, grid_factors: Optional[Sequence[torch.Tensor]] = None) -> KronMatrix:
        """K(X_s*, Z_s) per spatial factor. Omitted factors use the training coordinates."""
        factors = self.grid.xs_factors if grid_factors is None else tuple(grid_factors)
        if len(factors) != len(self.spatial_kernels):
            raise ShapeError(f"expected {len(self.spatial_kernels)} spatial factors, got {len(factors)}")
        return KronMatrix(tuple(
            k.matrix(x, z) for k, x, z in zip(self.spatial_kernels, factors, self.z_s)
        ))

    def spatial_prior_diag(self, grid_factors: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        factors = self.grid.xs_factors if grid_factors is None else tuple(grid_factors)
        return kron_vector([k.diag(x) for k, x in zip(self.spatial_kernels, factors)])

    def spatial_block(
        self,
        grid_factors: Optional[Sequence[torch.Tensor]] = None,
        rows: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Dense spatial cross-covariance of selected grid rows against Z_s.

        Args:
            grid_factors: Test spatial coordinates per factor, default training grid
            rows: Row indices into the test grid, default all rows

        Returns:
            (K_os as n_o x m_s, Σ_o k_s(x, x))
        """
        cross = self.spatial_cross(grid_factors)
        diag = self.spatial_prior_diag(grid_factors)
        if rows is None:
            return cross.dense(), diag.sum()
        rows = torch.as_tensor(rows, dtype=torch.long)
        return kron_rows(cross, rows), diag[rows].sum()

    # Flat parameter vector

    def trainable_parameters(self, include_beta: bool = True) -> List[nn.Parameter]:
        return [
            p for p in self.parameters()
            if p.requires_grad and (include_beta or p is not self.log_beta)
        ]

    def pack(self) -> torch.Tensor:
        """Trainable parameters as one vector; positive quantities are already logarithms."""
        return parameters_to_vector(self.trainable_parameters()).detach().clone()

    def unpack(self, vector: torch.Tensor) -> None:
        """
        Load a vector produced by pack().

        Raises:
            ShapeError: If the vector length does not match
        """
        params = self.trainable_parameters()
        expected = sum(p.numel() for p in params)
        if vector.dim() != 1 or vector.numel() != expected:
            raise ShapeError(f"expected a parameter vector of length {expected}, got {tuple(vector.shape)}")
        with torch.no_grad():
            vector_to_parameters(vector.to(torch.float64), params)
        self.mark_updated()

    def extra_repr(self) -> str:
        return (
            f"n_xi={self.grid.n_xi}, spatial={self.grid.spatial_shape}, d_y={self.grid.d_y}, "
            f"d_xi={self.d_xi}, m_xi={self.m_xi}, m_s={self.m_s}, prior={self.prior}"
        )
