"""
Comparison models: exact GP regression on one image at a time, and structured
GP regression over the (time x space) grid of a video.

The Bayesian GP-LVM comparison needs no code here: it is the structured model
trained with ``model.spatial_family = white``.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import torch
from torch import nn

from sgplvm.core.exceptions import DecompositionError, InputError, NumericError
from sgplvm.models.case import TestCase
from sgplvm.models.grid import ObservationGrid
from sgplvm.models.kernel import KernelSpec, TemporalKernelSpec
from sgplvm.models.prediction import PredictiveGaussian, clamp_variance
from sgplvm.numerics.bound import LOG_2PI
from sgplvm.numerics.kernels import KernelFamily
from sgplvm.numerics.kron import (
    KronMatrix,
    factored_eig_sym,
    jittered_cholesky,
    kron_matmat,
    kron_matvec,
    kron_spectral_terms,
    kron_vector,
)

logger = logging.getLogger(__name__)

NOISE_INIT = 0.1
NOISE_FLOOR = 1e-6


@dataclass
class BaselinePrediction:
    """
    Latent-function prediction of a baseline plus its fitted noise variance.

    Attributes:
        prediction: Gaussian over the predicted points, noise excluded
        noise_var: Fitted observation noise variance
        log_marginal: Log marginal likelihood at the fitted hyperparameters
    """

    prediction: PredictiveGaussian
    noise_var: float
    log_marginal: float


def grid_points(factors: Sequence[torch.Tensor]) -> torch.Tensor:
    """All points of a Cartesian grid in row-major order (last factor fastest)."""
    index = torch.meshgrid(*[torch.arange(x.shape[0]) for x in factors], indexing="ij")
    return torch.cat([x[i.reshape(-1)] for x, i in zip(factors, index)], dim=1)


def _minimize(params: List[nn.Parameter], objective: Callable[[], torch.Tensor], max_iters: int) -> None:
    optimizer = torch.optim.LBFGS(params, lr=1.0, max_iter=1, line_search_fn="strong_wolfe")

    def closure():
        optimizer.zero_grad()
        loss = objective()
        loss.backward()
        return loss

    for _ in range(max_iters):
        try:
            optimizer.step(closure)
        except (NumericError, torch.linalg.LinAlgError) as exc:
            logger.warning("Baseline fit stopped early: %s", exc)
            break


class BaselineService:
    """Exact GP regression baselines"""

    def per_image_gp(
        self,
        case: TestCase,
        xs_factors: Sequence[torch.Tensor],
        max_iters: int = 50,
        target_idx: Optional[torch.Tensor] = None,
    ) -> BaselinePrediction:
        """
        Fit a Matérn 3/2 GP to the observed pixels of one image and predict the rest.

        Variance, lengthscale and noise maximize the exact log marginal
        likelihood of the observed pixels (all channels share them).

        Args:
            case: Test case in standardized units
            xs_factors: Spatial coordinates per grid factor
            max_iters: L-BFGS iterations
            target_idx: Grid points to predict, default the missing points

        Returns:
            BaselinePrediction over the target points

        Raises:
            InputError: If the grid does not match the case
        """
        points = grid_points(xs_factors)
        if points.shape[0] != case.n_s:
            raise InputError(f"grid has {points.shape[0]} points, case expects {case.n_s}")
        target_idx = case.missing_idx if target_idx is None else torch.as_tensor(target_idx, dtype=torch.long)
        d_y = case.y_star.shape[1]
        X_t = points[target_idx]
        init_ls = points.std(0).clamp_min(1.0).mean().item()
        kernel = KernelSpec(KernelFamily.MATERN32, 1.0, [init_ls], points.shape[1])

        if case.n_observed == 0:
            var = kernel.diag(X_t).detach()[:, None].expand(-1, d_y).clone()
            mean = torch.zeros(X_t.shape[0], d_y, dtype=torch.float64)
            return BaselinePrediction(PredictiveGaussian(mean, var), NOISE_INIT, 0.0)

        X_o, y = points[case.observed_idx], case.y_star
        log_noise = nn.Parameter(torch.tensor(math.log(NOISE_INIT), dtype=torch.float64))
        eye = torch.eye(X_o.shape[0], dtype=torch.float64)

        def factor():
            noise = torch.exp(log_noise) + NOISE_FLOOR
            return jittered_cholesky(kernel.matrix(X_o) + noise * eye, 0.0, name="per-image GP covariance")

        def negative_lml():
            chol = factor()
            alpha = torch.cholesky_solve(y, chol)
            logdet = 2.0 * torch.log(torch.diagonal(chol)).sum()
            return 0.5 * (y * alpha).sum() + 0.5 * d_y * logdet + 0.5 * y.numel() * LOG_2PI

        _minimize([*kernel.parameters(), log_noise], negative_lml, max_iters)

        with torch.no_grad():
            try:
                chol = factor()
            except DecompositionError as exc:
                raise NumericError(f"per-image GP fit ended singular: {exc}") from exc
            lml = -float(negative_lml())
            K_to = kernel.matrix(X_t, X_o)
            mean = K_to @ torch.cholesky_solve(y, chol)
            V = torch.linalg.solve_triangular(chol, K_to.mT, upper=False)
            var = clamp_variance(kernel.diag(X_t) - V.square().sum(0))
        noise = float(torch.exp(log_noise)) + NOISE_FLOOR
        pred = PredictiveGaussian(mean, var[:, None].expand(-1, d_y).clone())
        return BaselinePrediction(pred, noise, lml)

    def per_image_gp_many(
        self, cases: Sequence[TestCase], xs_factors: Sequence[torch.Tensor], max_iters: int = 50
    ) -> List[BaselinePrediction]:
        return [self.per_image_gp(case, xs_factors, max_iters) for case in cases]

    def spatiotemporal_gp(
        self,
        train: ObservationGrid,
        t_star: torch.Tensor,
        max_iters: int = 50,
    ) -> BaselinePrediction:
        """
        Structured GP regression of pixel values on (time, space), predicting whole frames.

        The covariance is k_t ⊗ k_s1 ⊗ ... with an RBF time kernel and Matérn
        3/2 spatial kernels, plus noise. The log marginal likelihood uses the
        factored eigendecomposition, so no dense n x n matrix is formed.

        Args:
            train: Training frames (standardized) with timestamps
            t_star: Times of the frames to predict
            max_iters: L-BFGS iterations

        Returns:
            BaselinePrediction with rows in (time x space) order

        Raises:
            InputError: If the training grid has no timestamps
        """
        if train.timestamps is None:
            raise InputError("spatio-temporal regression needs timestamped frames")
        t = train.timestamps.reshape(-1, 1)
        t_star = torch.as_tensor(t_star, dtype=torch.float64).reshape(-1, 1)
        span = float(t[-1, 0] - t[0, 0]) if t.shape[0] > 1 else 1.0
        temporal = TemporalKernelSpec(KernelFamily.ARD_RBF, 1.0, max(span / 10.0, 1e-3))
        spatial = nn.ModuleList(
            KernelSpec(KernelFamily.MATERN32, 1.0, [max(float(x.std()), 1.0)], x.shape[1])
            for x in train.xs_factors
        )
        # one amplitude for the product kernel
        for k in spatial:
            k.log_variance.requires_grad_(False)
        log_noise = nn.Parameter(torch.tensor(math.log(NOISE_INIT), dtype=torch.float64))
        y = train.y

        def factors():
            return [temporal.matrix(t)] + [k.matrix(x) for k, x in zip(spatial, train.xs_factors)]

        def negative_lml():
            noise = torch.exp(log_noise) + NOISE_FLOOR
            logdet, quad = kron_spectral_terms(factors(), noise, y)
            return 0.5 * quad + 0.5 * y.shape[1] * logdet + 0.5 * y.numel() * LOG_2PI

        params = [*temporal.parameters()] + [p for p in spatial.parameters() if p.requires_grad] + [log_noise]
        _minimize(params, negative_lml, max_iters)

        with torch.no_grad():
            lml = -float(negative_lml())
            noise = torch.exp(log_noise) + NOISE_FLOOR
            eig = factored_eig_sym(KronMatrix(tuple(0.5 * (K + K.mT) for K in factors())))
            inv = 1.0 / (eig.eigenvalues() + noise)
            alpha = kron_matmat(eig.q(), inv[:, None] * kron_matmat(eig.q().transpose(), y))
            cross = KronMatrix(tuple([temporal.matrix(t_star, t)] + [
                k.matrix(x) for k, x in zip(spatial, train.xs_factors)
            ]))
            mean = kron_matmat(cross, alpha)
            proj = [c @ q for c, q in zip(cross.factors, eig.q_factors)]
            prior = kron_vector([temporal.diag(t_star)] + [k.diag(x) for k, x in zip(spatial, train.xs_factors)])
            var = clamp_variance(prior - kron_matvec(KronMatrix(tuple(p.square() for p in proj)), inv))
        logger.info("Spatio-temporal GP fitted: log marginal %.4f, noise %.4g", lml, float(noise))
        pred = PredictiveGaussian(mean, var[:, None].expand(-1, y.shape[1]).clone())
        return BaselinePrediction(pred, float(noise), lml)


baseline_service = BaselineService()
