"""
Psi statistics: expectations of ARD-RBF kernel matrices under diagonal
Gaussian latent marginals, and their Kronecker combination with the spatial
kernels.
"""
from dataclasses import dataclass
from typing import Sequence, Union

import torch

from sgplvm.core.exceptions import InputError, ShapeError
from sgplvm.numerics.kernels import KernelFamily, KernelLike, kernel_diag, kernel_matrix
from sgplvm.numerics.kron import KronMatrix

# Rows of q summed per step when accumulating Ψ₂, in index order.
PSI2_CHUNK = 128


@dataclass(frozen=True)
class PsiSet:
    """Latent-factor statistics ψ₀, Ψ₁ (n_ξ x m_ξ) and Ψ₂ (m_ξ x m_ξ)."""

    psi0: torch.Tensor
    psi1: torch.Tensor
    psi2: torch.Tensor


@dataclass(frozen=True)
class StructuredPsiSet:
    """
    Psi statistics of the full (latent x spatial) input grid.

    Attributes:
        psi0_full: ψ₀^(ξ) · Π tr(K_ff^(s))
        psi1: Ψ₁^(ξ) ⊗ K_fu^(s_1) ⊗ ...
        psi2: Ψ₂^(ξ) ⊗ K_uf^(s_1) K_fu^(s_1) ⊗ ...
    """

    psi0_full: torch.Tensor
    psi1: KronMatrix
    psi2: KronMatrix

    @property
    def latent(self) -> PsiSet:
        return PsiSet(self.psi0_full, self.psi1.factors[0], self.psi2.factors[0])


def _moments(q):
    marg = q.marginals() if hasattr(q, "marginals") else q
    mean, var = marg.mean, marg.variance
    if mean.shape != var.shape or mean.dim() != 2:
        raise ShapeError(f"latent mean {tuple(mean.shape)} and variance {tuple(var.shape)} must match")
    with torch.no_grad():
        if var.numel() and (not bool(torch.all(torch.isfinite(var))) or bool(torch.any(var < 0))):
            raise InputError("latent posterior variances must be finite and non-negative")
    return mean, var


def _check_rbf(spec: KernelLike, Z: torch.Tensor, d: int) -> torch.Tensor:
    if KernelFamily(spec.family) is not KernelFamily.ARD_RBF:
        raise InputError(f"psi statistics need an ard_rbf latent kernel, got {spec.family}")
    if Z.dim() != 2 or Z.shape[1] != d:
        raise ShapeError(f"inducing inputs must be m x {d}, got {tuple(Z.shape)}")
    ls2 = spec.lengthscales.square()
    if ls2.shape[0] not in (1, d):
        raise ShapeError(f"kernel has {ls2.shape[0]} lengthscales for {d} latent dimensions")
    return ls2


def psi0_rbf(q, spec: KernelLike) -> torch.Tensor:
    """ψ₀ = n_ξ·σ² for the ARD-RBF kernel."""
    mean, _ = _moments(q)
    return mean.shape[0] * spec.variance


def psi1_rbf(q, Z: torch.Tensor, spec: KernelLike) -> torch.Tensor:
    """
    Ψ₁[i, k] = E_q[k(x_i, z_k)].

    Args:
        q: Latent posterior (or its marginals) with n x d means and variances
        Z: m x d inducing inputs
        spec: ARD-RBF kernel

    Returns:
        n x m matrix

    Raises:
        InputError: On a non-RBF kernel or invalid variances
        ShapeError: On mismatched dimensions
    """
    mean, var = _moments(q)
    ls2 = _check_rbf(spec, Z, mean.shape[1])
    denom = ls2 + var  # n x d
    log_norm = -0.5 * torch.log1p(var / ls2).sum(-1)
    dist = (mean[:, None, :] - Z[None, :, :]).square() / denom[:, None, :]
    return torch.exp(torch.log(spec.variance) + log_norm[:, None] - 0.5 * dist.sum(-1))


def psi2_rbf(q, Z: torch.Tensor, spec: KernelLike) -> torch.Tensor:
    """
    Ψ₂ = Σ_i E_q[k(z, x_i) k(x_i, z')], accumulated over rows of q in fixed
    chunks of PSI2_CHUNK.

    Returns:
        m x m symmetric matrix
    """
    mean, var = _moments(q)
    ls2 = _check_rbf(spec, Z, mean.shape[1])
    m = Z.shape[0]
    zdiff = (Z[:, None, :] - Z[None, :, :]).square() / (4.0 * ls2)
    zbar = 0.5 * (Z[:, None, :] + Z[None, :, :])
    total = torch.zeros(m, m, dtype=Z.dtype)
    for start in range(0, mean.shape[0], PSI2_CHUNK):
        mu = mean[start:start + PSI2_CHUNK]
        c = var[start:start + PSI2_CHUNK]
        denom = ls2 + 2.0 * c
        log_norm = -0.5 * torch.log1p(2.0 * c / ls2).sum(-1)
        dist = (mu[:, None, None, :] - zbar[None]).square() / denom[:, None, None, :]
        total = total + torch.exp(log_norm[:, None, None] - dist.sum(-1)).sum(0)
    return spec.variance.square() * torch.exp(-zdiff.sum(-1)) * total


def psi_stats(q, Z: torch.Tensor, spec: KernelLike) -> PsiSet:
    return PsiSet(psi0_rbf(q, spec), psi1_rbf(q, Z, spec), psi2_rbf(q, Z, spec))


def structured_psi(
    q,
    z_xi: torch.Tensor,
    z_s: Sequence[torch.Tensor],
    xs: Sequence[torch.Tensor],
    latent_spec: KernelLike,
    spatial_specs: Union[KernelLike, Sequence[KernelLike]],
) -> StructuredPsiSet:
    """
    Combine latent psi statistics with spatial kernel matrices.

    Args:
        q: Latent posterior over the n_ξ latent points
        z_xi: m_ξ x d_ξ latent inducing inputs
        z_s: Spatial inducing inputs, one matrix per spatial factor
        xs: Spatial inputs, one matrix per spatial factor
        latent_spec: ARD-RBF latent kernel
        spatial_specs: One kernel per spatial factor

    Returns:
        StructuredPsiSet in (latent, spatial...) Kronecker order
    """
    if not isinstance(spatial_specs, (list, tuple, torch.nn.ModuleList)):
        spatial_specs = [spatial_specs]
    if not (len(z_s) == len(xs) == len(spatial_specs)):
        raise ShapeError(
            f"got {len(xs)} spatial input factors, {len(z_s)} inducing factors "
            f"and {len(spatial_specs)} spatial kernels"
        )
    latent = psi_stats(q, z_xi, latent_spec)
    psi0_full = latent.psi0
    psi1_factors = [latent.psi1]
    psi2_factors = [latent.psi2]
    for spec, x, z in zip(spatial_specs, xs, z_s):
        kfu = kernel_matrix(spec, x, z)
        psi0_full = psi0_full * kernel_diag(spec, x).sum()
        psi1_factors.append(kfu)
        psi2_factors.append(kfu.mT @ kfu)
    return StructuredPsiSet(psi0_full, KronMatrix(tuple(psi1_factors)), KronMatrix(tuple(psi2_factors)))
