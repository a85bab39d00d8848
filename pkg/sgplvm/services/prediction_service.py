import logging
from typing import Optional, Sequence

import torch

from sgplvm.core.exceptions import ConditioningError, DecompositionError, InputError, ModelStateError, ShapeError
from sgplvm.models.prediction import MixturePrediction, PredictiveGaussian, clamp_variance
from sgplvm.models.sgplvm import SgplvmModel
from sgplvm.numerics.gaussian import LatentGaussian, precision_factor, temporal_gram
from sgplvm.numerics.kernels import FixedKernel
from sgplvm.numerics.kron import KronMatrix, jittered_cholesky, kron_matmat, kron_matvec, kron_vector
from sgplvm.numerics.psi import psi1_rbf
from sgplvm.utils.helpers import make_generator

logger = logging.getLogger(__name__)


def upsample_grid(factors: Sequence[torch.Tensor], k: int) -> tuple:
    """
    k-fold finer coordinates for one-dimensional, evenly spaced grid factors.

    Point j of the new factor sits at x_0 + Δ·j/k, so every k-th point is an
    original coordinate; for k = 2 the new points fall on half-integer offsets.

    Raises:
        InputError: On k < 1 or a multi-dimensional factor
    """
    if k < 1:
        raise InputError(f"upsampling factor must be at least 1, got {k}")
    out = []
    for i, x in enumerate(factors):
        if x.dim() != 2 or x.shape[1] != 1:
            raise InputError(f"spatial factor {i} is not one-dimensional, cannot upsample")
        step = float(x[1, 0] - x[0, 0]) if x.shape[0] > 1 else 1.0
        fine = torch.arange(k * x.shape[0], dtype=torch.float64) * (step / k) + x[0, 0]
        out.append(fine.reshape(-1, 1))
    return tuple(out)


class PredictionService:
    """Predictive densities of a trained model"""

    @staticmethod
    def _frozen_kernels(model: SgplvmModel):
        latent = FixedKernel.frozen(model.latent_kernel)
        spatial = [FixedKernel.frozen(k) for k in model.spatial_kernels]
        return latent, spatial

    def _spatial_factors(self, model: SgplvmModel, grid_factors):
        factors = model.grid.xs_factors if grid_factors is None else tuple(grid_factors)
        if len(factors) != len(model.spatial_kernels):
            raise ShapeError(f"expected {len(model.spatial_kernels)} spatial factors, got {len(factors)}")
        return factors

    def predict_at(
        self,
        model: SgplvmModel,
        x_star: torch.Tensor,
        grid_factors: Optional[Sequence[torch.Tensor]] = None,
        want_full_cov: bool = False,
    ) -> PredictiveGaussian:
        """
        Projected-process prediction at latent points x_star over a spatial grid.

        Rows of the result follow ξ⊗s order: all grid points of x_star[0],
        then of x_star[1], and so on.

        Args:
            model: Trained model
            x_star: n_cases x d_xi latent inputs
            grid_factors: Test spatial coordinates per factor, default training grid
            want_full_cov: Also return per-case covariance blocks over the grid

        Returns:
            PredictiveGaussian in standardized units

        Raises:
            ModelStateError: If the model is untrained
            ShapeError: On mismatched latent dimension or spatial factors
        """
        model.require_trained()
        x_star = torch.as_tensor(x_star, dtype=torch.float64)
        if x_star.dim() != 2 or x_star.shape[1] != model.d_xi:
            raise ShapeError(f"expected n x {model.d_xi} latent inputs, got {tuple(x_star.shape)}")
        factors = self._spatial_factors(model, grid_factors)
        ws = model.frozen_workspace()
        latent, spatial = self._frozen_kernels(model)

        with torch.no_grad():
            # tied factors reach the kernel by identity, as the white kernel requires
            cross = [latent.matrix(x_star, model.z_xi.detach())]
            cross += [k.matrix(x, z) for k, x, z in zip(spatial, factors, model.z_s)]
            k_star = KronMatrix(tuple(cross))
            mean = kron_matmat(k_star, ws.h)

            proj = [c @ g for c, g in zip(k_star.factors, ws.g.factors)]
            d = ws.d.values()
            weights = 1.0 - 1.0 / (ws.beta.detach() * d)
            prior = kron_vector([latent.diag(x_star)] + [k.diag(x) for k, x in zip(spatial, factors)])
            var = prior - kron_matvec(KronMatrix(tuple(p.square() for p in proj)), weights)
            var = clamp_variance(var)[:, None].expand(-1, ws.d_y).clone()

            cov = None
            if want_full_cov:
                cov = self._covariance_blocks(x_star, factors, spatial, latent, proj, weights, ws.d_y)
        return PredictiveGaussian(mean, var, cov)

    @staticmethod
    def _covariance_blocks(x_star, factors, spatial, latent, proj, weights, d_y):
        k_ss = KronMatrix(tuple(k.matrix(x) for k, x in zip(spatial, factors))).dense()
        p_s = KronMatrix(tuple(proj[1:])).dense()
        k_xx = latent.diag(x_star)
        blocks = []
        for r in range(x_star.shape[0]):
            p_r = torch.kron(proj[0][r:r + 1], p_s)
            block = k_xx[r] * k_ss - (p_r * weights) @ p_r.mT
            blocks.append(0.5 * (block + block.mT))
        cov = torch.stack(blocks)[:, None]
        return cov.expand(-1, d_y, -1, -1).clone()

    def predict_marginal_mean(
        self,
        model: SgplvmModel,
        q_star: LatentGaussian,
        grid_factors: Optional[Sequence[torch.Tensor]] = None,
    ) -> torch.Tensor:
        """
        Predictive mean with the latent inputs integrated out: Ψ₁* K_ψ⁻¹ Ψ₁ᵀY.

        Returns:
            (n_cases · n_s*) x d_y matrix in ξ⊗s order
        """
        model.require_trained()
        factors = self._spatial_factors(model, grid_factors)
        ws = model.frozen_workspace()
        latent, spatial = self._frozen_kernels(model)
        with torch.no_grad():
            psi1 = psi1_rbf(q_star.detach(), model.z_xi.detach(), latent)
            cross = [psi1] + [k.matrix(x, z) for k, x, z in zip(spatial, factors, model.z_s)]
            return kron_matmat(KronMatrix(tuple(cross)), ws.h)

    def predict_mixture(
        self,
        model: SgplvmModel,
        q_star: LatentGaussian,
        grid_factors: Optional[Sequence[torch.Tensor]] = None,
        n_mog: int = 20,
        seed: int = 0,
        want_full_cov: bool = False,
    ) -> MixturePrediction:
        """
        Mixture-of-Gaussians approximation of the marginal predictive density.

        Each of the n_mog components is predict_at() at one joint sample of all
        test latents from q_star, drawn with a generator seeded by seed.

        Raises:
            InputError: If n_mog < 1
        """
        if n_mog < 1:
            raise InputError(f"n_mog must be at least 1, got {n_mog}")
        generator = make_generator(seed)
        samples = q_star.detach().sample(n_mog, generator)
        return MixturePrediction([
            self.predict_at(model, x, grid_factors, want_full_cov) for x in samples
        ])

    def condition_on_observed(
        self,
        pred: PredictiveGaussian,
        observed_idx: torch.Tensor,
        observed_values: torch.Tensor,
        noise_var: float = 0.0,
        target_idx: Optional[torch.Tensor] = None,
    ) -> PredictiveGaussian:
        """
        Condition a single-case Gaussian prediction on observed points.

        Args:
            pred: Prediction with covariance blocks of shape (1, d_y, n_s, n_s)
            observed_idx: Indices of the observed points
            observed_values: n_o x d_y observed values
            noise_var: Variance added to Σ_oo
            target_idx: Points to return, default every unobserved point

        Returns:
            PredictiveGaussian over the target points

        Raises:
            InputError: Without covariance blocks or with several cases
            ConditioningError: If Σ_oo stays singular after jitter
        """
        if pred.covariance is None:
            raise InputError("conditioning needs a prediction with covariance blocks")
        if pred.covariance.shape[0] != 1:
            raise InputError(f"condition one test case at a time, got {pred.covariance.shape[0]}")
        n = pred.n
        observed_idx = torch.as_tensor(observed_idx, dtype=torch.long).reshape(-1)
        values = torch.as_tensor(observed_values, dtype=torch.float64).reshape(observed_idx.shape[0], pred.d_y)
        if target_idx is None:
            keep = torch.ones(n, dtype=torch.bool)
            keep[observed_idx] = False
            target_idx = torch.nonzero(keep).reshape(-1)
        target_idx = torch.as_tensor(target_idx, dtype=torch.long).reshape(-1)

        cov = pred.covariance[0]  # d_y x n x n
        mean_t = pred.mean[target_idx]
        cov_tt = cov[:, target_idx][:, :, target_idx]
        if observed_idx.numel() == 0 or target_idx.numel() == 0:
            var = torch.diagonal(cov_tt, dim1=-2, dim2=-1).mT
            return PredictiveGaussian(mean_t, clamp_variance(var), cov_tt[None])

        cov_oo = cov[:, observed_idx][:, :, observed_idx]
        cov_oo = cov_oo + noise_var * torch.eye(observed_idx.numel(), dtype=cov.dtype)
        cov_to = cov[:, target_idx][:, :, observed_idx]
        try:
            chol = jittered_cholesky(cov_oo, 0.0, name="observed covariance")
        except DecompositionError as exc:
            raise ConditioningError(f"cannot condition on {observed_idx.numel()} observed points: {exc}") from exc

        resid = (values - pred.mean[observed_idx]).mT[:, :, None]  # d_y x n_o x 1
        gain = torch.cholesky_solve(cov_to.mT, chol).mT  # d_y x n_t x n_o
        mean = mean_t + (gain @ resid)[:, :, 0].mT
        cond = cov_tt - gain @ cov_to.mT
        cond = 0.5 * (cond + cond.mT)
        var = clamp_variance(torch.diagonal(cond, dim1=-2, dim2=-1).mT.contiguous())
        return PredictiveGaussian(mean, var, cond[None])

    def dynamical_latent_at(self, model: SgplvmModel, t_star: torch.Tensor) -> LatentGaussian:
        """
        Posterior over the latents at new times given the training latents.

        Mean K_*x μ̄_j and variance k(t*, t*) − K_*x (K_xx + Λ_j⁻¹)⁻¹ K_x* per
        latent dimension j.

        Raises:
            ModelStateError: If the model has no dynamical prior
        """
        if not model.q_latent.is_dynamical:
            raise ModelStateError("latent posteriors at new times need a dynamical model")
        t_star = torch.as_tensor(t_star, dtype=torch.float64).reshape(-1, 1)
        q = model.q_latent
        temporal = FixedKernel.frozen(model.temporal)
        with torch.no_grad():
            K = temporal_gram(temporal, q.timestamps, model.jitter)
            k_sx = temporal.matrix(t_star, q.timestamps.reshape(-1, 1))
            mean = k_sx @ q.mu.detach()
            s, chol = precision_factor(K, q.lam.detach())
            V = torch.linalg.solve_triangular(chol, s[:, :, None] * k_sx.mT[None], upper=False)
            var = temporal.diag(t_star)[None, :] - V.square().sum(1)
        return LatentGaussian(mean, clamp_variance(var.mT.contiguous()))


prediction_service = PredictionService()
