import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch

from sgplvm.core.config import InferConfig
from sgplvm.core.exceptions import InferenceError, NumericError
from sgplvm.models.case import TestCase
from sgplvm.models.prediction import PredictiveGaussian
from sgplvm.models.sgplvm import SgplvmModel
from sgplvm.numerics.bound import test_bound as partial_test_bound
from sgplvm.numerics.gaussian import LatentGaussian
from sgplvm.numerics.kernels import FixedKernel
from sgplvm.services.prediction_service import prediction_service
from sgplvm.utils.helpers import make_generator

logger = logging.getLogger(__name__)


@dataclass
class InferenceResult:
    """
    Optimized test latent posterior of one case.

    Attributes:
        posterior: 1 x d_xi Gaussian q(x*)
        bound: L* at the posterior
        restart_bounds: Best L* reached by every restart, NaN for failed restarts
    """

    posterior: LatentGaussian
    bound: float
    restart_bounds: List[float] = field(default_factory=list)


@dataclass
class ImputationResult:
    """
    Predictions at the missing points of one case.

    Attributes:
        missing_idx: Grid indices of the imputed points
        prediction: Conditional Gaussian over the missing points
        inference: The latent inference that fed the prediction
    """

    missing_idx: torch.Tensor
    prediction: PredictiveGaussian
    inference: InferenceResult


class InferenceService:
    """Test-time latent inference and imputation with a frozen model"""

    def latent_prior(self, model: SgplvmModel, t_star: Optional[float] = None) -> LatentGaussian:
        """
        Prior of a test latent: N(0, I) for the iid prior; for the dynamical
        prior the latent posterior at t*, or N(0, k_t(t, t)) without a time.
        """
        d = model.d_xi
        zeros = torch.zeros(1, d, dtype=torch.float64)
        if not model.q_latent.is_dynamical:
            return LatentGaussian(zeros, torch.ones(1, d, dtype=torch.float64))
        if t_star is None:
            var = model.temporal.variance.detach() * torch.ones(1, d, dtype=torch.float64)
            return LatentGaussian(zeros, var)
        return prediction_service.dynamical_latent_at(model, torch.tensor([float(t_star)]))

    def _nearest_training_mean(self, model: SgplvmModel, case: TestCase, prior: LatentGaussian) -> torch.Tensor:
        if case.n_observed == 0 or case.grid_factors is not None:
            return prior.mean.clone()
        with torch.no_grad():
            images = model.grid.y.reshape(model.grid.n_xi, model.grid.n_s, -1)
            observed = images[:, case.observed_idx, :]
            dist = (observed - case.y_star[None]).square().sum((1, 2))
            nearest = int(torch.argmin(dist))
            return model.latent_marginals().mean[nearest:nearest + 1].detach().clone()

    def infer_latent(self, model: SgplvmModel, case: TestCase, cfg: InferConfig) -> InferenceResult:
        """
        Maximize L* over q(x*) with every trained quantity held fixed.

        The first restart starts at the latent mean of the training image
        closest to the observed values, the others at draws from the test
        prior. The best restart is returned; its L* is never below the value
        at any restart's starting point.

        Args:
            model: Trained model
            case: Partially observed test case
            cfg: Optimizer, iterations, restarts and seed

        Returns:
            InferenceResult

        Raises:
            ModelStateError: If the model is untrained
            InferenceError: If every restart fails
        """
        model.require_trained()
        ws = model.frozen_workspace()
        prior = self.latent_prior(model, case.t_star)
        if case.n_observed == 0:
            # the bound is −KL(q*||prior) alone
            return InferenceResult(prior, 0.0, [0.0])

        latent = FixedKernel.frozen(model.latent_kernel)
        z_xi = model.z_xi.detach()
        with torch.no_grad():
            block = model.spatial_block(case.grid_factors, case.observed_idx)
            block = (block[0].detach(), block[1].detach())
        y_star = case.y_star

        def objective(mu, log_var):
            q = LatentGaussian(mu, torch.exp(log_var))
            return partial_test_bound(ws, y_star, block, q, z_xi, latent, prior)

        generator = make_generator(cfg.seed)
        starts = [self._nearest_training_mean(model, case, prior)]
        for _ in range(cfg.restarts - 1):
            eps = torch.randn(prior.mean.shape, dtype=torch.float64, generator=generator)
            starts.append(prior.mean + eps * prior.variance.sqrt())

        best: Optional[InferenceResult] = None
        restart_bounds = []
        for i, start in enumerate(starts):
            try:
                mu, log_var, value = self._optimize(objective, start, cfg)
            except (NumericError, torch.linalg.LinAlgError) as exc:
                logger.warning("Inference restart %d failed: %s", i, exc)
                restart_bounds.append(float("nan"))
                continue
            restart_bounds.append(value)
            if best is None or value > best.bound:
                best = InferenceResult(LatentGaussian(mu, torch.exp(log_var)), value)
        if best is None:
            raise InferenceError(f"all {len(starts)} inference restarts failed")
        best.restart_bounds = restart_bounds
        return best

    def _optimize(self, objective, start: torch.Tensor, cfg: InferConfig):
        mu = start.clone().requires_grad_(True)
        log_var = torch.full_like(start, math.log(cfg.init_variance)).requires_grad_(True)
        with torch.no_grad():
            best_value = float(objective(mu, log_var))
        if not math.isfinite(best_value):
            raise NumericError("test bound is not finite at the starting point")
        best_mu, best_log_var = mu.detach().clone(), log_var.detach().clone()

        params = [mu, log_var]
        if cfg.optimizer == "adam":
            optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
        else:
            optimizer = torch.optim.LBFGS(params, lr=1.0, max_iter=1, line_search_fn="strong_wolfe")

        def closure():
            optimizer.zero_grad()
            loss = -objective(mu, log_var)
            loss.backward()
            return loss

        previous = best_value
        for _ in range(cfg.max_iters):
            optimizer.step(closure)
            with torch.no_grad():
                value = float(objective(mu, log_var))
            if not math.isfinite(value):
                break
            if value > best_value:
                best_value = value
                best_mu, best_log_var = mu.detach().clone(), log_var.detach().clone()
            if abs(value - previous) < cfg.tolerance * max(1.0, abs(previous)):
                break
            previous = value
        return best_mu, best_log_var, best_value

    def infer_many(
        self,
        model: SgplvmModel,
        cases: Sequence[TestCase],
        cfg: InferConfig,
        threads: int = 1,
    ) -> List[InferenceResult]:
        """Infer every case independently, fanning out over a thread pool."""
        model.frozen_workspace().h  # computed once before threads share it
        if threads <= 1:
            return [self.infer_latent(model, case, cfg) for case in cases]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda case: self.infer_latent(model, case, cfg), cases))

    def impute(
        self,
        model: SgplvmModel,
        case: TestCase,
        cfg: InferConfig,
        n_mog: Optional[int] = None,
        seed: Optional[int] = None,
    ) -> ImputationResult:
        """
        Fill in the unobserved points of a case.

        Infers q(x*), predicts over the full grid with the marginal mean and
        the mixture-of-Gaussians covariance, then conditions on the observed
        values.

        Raises:
            InferenceError: If latent inference fails
            ConditioningError: If the observed covariance is singular
        """
        n_mog = cfg.n_mog if n_mog is None else n_mog
        seed = cfg.seed if seed is None else seed
        inference = self.infer_latent(model, case, cfg)
        missing = case.missing_idx

        mean = prediction_service.predict_marginal_mean(model, inference.posterior, case.grid_factors)
        mixture = prediction_service.predict_mixture(
            model, inference.posterior, case.grid_factors, n_mog=n_mog, seed=seed, want_full_cov=True
        )
        cov = mixture.covariance()
        var = torch.diagonal(cov[0], dim1=-2, dim2=-1).mT.clamp_min(0.0)
        joint = PredictiveGaussian(mean, var, cov)
        conditional = prediction_service.condition_on_observed(
            joint, case.observed_idx, case.y_star, target_idx=missing
        )
        return ImputationResult(missing, conditional, inference)

    def impute_many(
        self,
        model: SgplvmModel,
        cases: Sequence[TestCase],
        cfg: InferConfig,
        threads: int = 1,
    ) -> List[ImputationResult]:
        model.frozen_workspace().h  # computed once before threads share it
        if threads <= 1:
            return [self.impute(model, case, cfg) for case in cases]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda case: self.impute(model, case, cfg), cases))


inference_service = InferenceService()
