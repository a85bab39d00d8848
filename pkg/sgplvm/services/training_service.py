import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA

from sgplvm.core.config import ModelConfig, TrainConfig
from sgplvm.core.exceptions import ConfigError, NonFiniteBoundError, NumericError
from sgplvm.models.checkpoint import OptimizerMoments
from sgplvm.models.grid import ObservationGrid
from sgplvm.models.kernel import KernelSpec, TemporalKernelSpec
from sgplvm.models.latent import VariationalLatent
from sgplvm.models.sgplvm import SgplvmModel
from sgplvm.numerics.gaussian import temporal_gram
from sgplvm.numerics.kernels import KernelFamily
from sgplvm.utils.helpers import make_rng, standardize

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "bound", "beta", "grad_norm", "wall_ms")
DYNAMICAL_LAMBDA_INIT = 10.0
MAX_REJECTED_STEPS = 3


@dataclass
class TrainResult:
    """
    Outcome of a training run.

    Attributes:
        model: The trained model, restored to its best bound
        trace: One row per recorded iteration, keys TRACE_COLUMNS
        initial_bound: Bound before the first step
        final_bound: Bound of the returned parameters
        converged: Stopped on the tolerance rather than max_iters
        moments: Adam moments when the adam optimizer ran
    """

    model: SgplvmModel
    trace: List[Dict[str, float]] = field(default_factory=list)
    initial_bound: float = float("nan")
    final_bound: float = float("nan")
    converged: bool = False
    moments: Optional[OptimizerMoments] = None


def _length_scale_init(X: np.ndarray) -> np.ndarray:
    std = X.std(axis=0)
    return np.where(std > 1e-8, std, 1.0)


def _subset_rows(n: int, m: int) -> np.ndarray:
    return np.unique(np.round(np.linspace(0, n - 1, m)).astype(int))


class TrainingService:
    """Initialization and optimization of the collapsed bound"""

    def initialize(
        self,
        data: ObservationGrid,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
    ) -> SgplvmModel:
        """
        Build an initial model from raw data.

        The data are standardized per channel; latent means come from PCA of
        the n_xi x (n_s·d_y) matrix scaled by the first component's standard
        deviation, or from a seeded normal draw.

        Args:
            data: Raw training grid
            model_cfg: Dimensions, kernels and prior
            train_cfg: Initialization method and seed

        Returns:
            Untrained SgplvmModel

        Raises:
            ConfigError: If the dimensions do not fit the data
        """
        n_xi, n_s, d_y = data.n_xi, data.n_s, data.d_y
        d_xi, m_xi = model_cfg.d_xi, model_cfg.m_xi
        if d_xi > min(n_xi, n_s * d_y):
            raise ConfigError(f"d_xi={d_xi} exceeds min(n_xi, n_s*d_y) = {min(n_xi, n_s * d_y)}")
        if m_xi > n_xi:
            raise ConfigError(f"m_xi={m_xi} exceeds the number of latent points n_xi={n_xi}")
        m_s = self._spatial_inducing_sizes(data, model_cfg)
        dynamical = model_cfg.prior == "dynamical"
        if dynamical and data.timestamps is None:
            raise ConfigError("the dynamical prior needs timestamps in the training data")

        rng = make_rng(train_cfg.seed)
        y_std, y_mean, y_scale = standardize(data.y)
        grid = data.with_y(y_std)
        X = self._init_latents(grid, d_xi, train_cfg, rng)

        temporal = None
        if dynamical:
            t = grid.timestamps
            span = float(t[-1] - t[0]) if n_xi > 1 else 1.0
            lengthscale = model_cfg.temporal_lengthscale or max(span / 10.0, 1e-3)
            temporal = TemporalKernelSpec(model_cfg.temporal_family, 1.0, lengthscale)
            with torch.no_grad():
                K = temporal_gram(temporal, t, model_cfg.jitter)
                chol = torch.linalg.cholesky(K)
                mu_bar = torch.cholesky_solve(torch.as_tensor(X), chol)
            q = VariationalLatent(
                mu_bar,
                log_lambda=torch.full((n_xi, d_xi), math.log(DYNAMICAL_LAMBDA_INIT), dtype=torch.float64),
                timestamps=t,
            )
        else:
            q = VariationalLatent(
                torch.as_tensor(X),
                log_var=torch.full((n_xi, d_xi), math.log(model_cfg.init_variance), dtype=torch.float64),
            )

        z_xi = self._init_inducing(X, m_xi, model_cfg, train_cfg, rng)
        latent_kernel = KernelSpec(KernelFamily.ARD_RBF, 1.0, _length_scale_init(X).tolist(), d_xi)

        spatial_kernels, z_s = [], []
        for x, m in zip(grid.xs_factors, m_s):
            xs = x.numpy()
            ls = _length_scale_init(xs)
            if not model_cfg.spatial_ard:
                ls = [float(ls.mean())]
            spatial_kernels.append(KernelSpec(model_cfg.spatial_family, 1.0, list(ls), xs.shape[1]))
            z_s.append(None if m == x.shape[0] else x[torch.as_tensor(_subset_rows(x.shape[0], m))])

        model = SgplvmModel(
            grid, latent_kernel, spatial_kernels, q, z_xi, z_s, model_cfg.beta_init,
            temporal=temporal, jitter=model_cfg.jitter, y_mean=y_mean, y_scale=y_scale,
            optimize_spatial_inducing=model_cfg.optimize_spatial_inducing,
        )
        logger.info("Initialized %r", model)
        return model

    def _spatial_inducing_sizes(self, data: ObservationGrid, model_cfg: ModelConfig) -> List[int]:
        sizes = list(data.spatial_shape)
        if model_cfg.m_s is None:
            return sizes
        if len(model_cfg.m_s) != len(sizes):
            raise ConfigError(f"m_s has {len(model_cfg.m_s)} entries for {len(sizes)} spatial factors")
        for i, (m, n) in enumerate(zip(model_cfg.m_s, sizes)):
            if not 1 <= m <= n:
                raise ConfigError(f"m_s[{i}]={m} must lie in [1, {n}]")
            if m < n and model_cfg.spatial_family == "white":
                raise ConfigError("a white spatial kernel needs every spatial input as an inducing input")
        return list(model_cfg.m_s)

    def _init_latents(
        self, grid: ObservationGrid, d_xi: int, cfg: TrainConfig, rng: np.random.Generator
    ) -> np.ndarray:
        if cfg.init == "random":
            return rng.standard_normal((grid.n_xi, d_xi))
        wide = grid.wide().numpy()
        X = PCA(n_components=d_xi, random_state=cfg.seed).fit_transform(wide)
        scale = X[:, 0].std()
        return X / scale if scale > 1e-12 else X

    def _init_inducing(
        self, X: np.ndarray, m_xi: int, model_cfg: ModelConfig, cfg: TrainConfig, rng: np.random.Generator
    ) -> torch.Tensor:
        if m_xi == X.shape[0]:
            return torch.as_tensor(X.copy())
        if model_cfg.inducing_init == "kmeans":
            km = KMeans(n_clusters=m_xi, n_init=10, random_state=cfg.seed).fit(X)
            return torch.as_tensor(km.cluster_centers_.astype(np.float64))
        idx = np.sort(rng.choice(X.shape[0], size=m_xi, replace=False))
        return torch.as_tensor(X[idx].copy())

    # Optimization

    def _optimizer(self, params, cfg: TrainConfig, kind: Optional[str] = None) -> torch.optim.Optimizer:
        if (kind or cfg.optimizer) == "adam":
            return torch.optim.Adam(params, lr=cfg.learning_rate)
        return torch.optim.LBFGS(
            params, lr=1.0, max_iter=1, history_size=cfg.lbfgs_history, line_search_fn="strong_wolfe"
        )

    @staticmethod
    def _snapshot(model: SgplvmModel) -> Dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in model.state_dict().items()}

    @staticmethod
    def _restore(model: SgplvmModel, state: Dict[str, torch.Tensor]) -> None:
        model.load_state_dict(state)
        model.mark_updated()

    def _load_moments(self, optimizer: torch.optim.Optimizer, params, moments: OptimizerMoments) -> None:
        offset = 0
        for p in params:
            n = p.numel()
            optimizer.state[p] = {
                "step": torch.tensor(float(moments.step)),
                "exp_avg": moments.exp_avg[offset:offset + n].reshape(p.shape).clone(),
                "exp_avg_sq": moments.exp_avg_sq[offset:offset + n].reshape(p.shape).clone(),
            }
            offset += n

    def _collect_moments(self, optimizer: torch.optim.Optimizer, params) -> Optional[OptimizerMoments]:
        states = [optimizer.state.get(p, {}) for p in params]
        if not states or any("exp_avg" not in s for s in states):
            return None
        return OptimizerMoments(
            exp_avg=torch.cat([s["exp_avg"].reshape(-1) for s in states]).detach().clone(),
            exp_avg_sq=torch.cat([s["exp_avg_sq"].reshape(-1) for s in states]).detach().clone(),
            step=int(float(states[0]["step"])),
        )

    def train(
        self,
        model: SgplvmModel,
        cfg: TrainConfig,
        resume: Optional[OptimizerMoments] = None,
    ) -> TrainResult:
        """
        Maximize the collapsed bound.

        β stays fixed for the first fixed_beta_iters iterations, then all
        parameters move jointly. The run stops after max_iters iterations or
        once the relative bound change of the joint phase drops below the
        tolerance. The parameters with the best bound seen are returned.

        Args:
            model: Initialized model, updated in place
            cfg: Optimizer settings
            resume: Adam moments of an earlier run; skips the fixed-β phase

        Returns:
            TrainResult with the bound trace

        A step that fails numerically is rejected: the model returns to its
        best state and, under L-BFGS, continues with Adam.

        Raises:
            NonFiniteBoundError: After MAX_REJECTED_STEPS consecutive rejected
                steps; the model keeps its best state and the error carries the trace
        """
        start = time.perf_counter()
        trace: List[Dict[str, float]] = []

        with torch.no_grad():
            initial = float(model.elbo())
        trace.append(self._row(0, initial, model, float("nan"), start))
        result = TrainResult(model, trace, initial, initial)
        if cfg.max_iters == 0:
            model.is_trained = True
            model.mark_updated()
            return result

        best_bound, best_state = initial, self._snapshot(model)
        fixed_iters = 0 if resume is not None else min(cfg.fixed_beta_iters, cfg.max_iters)
        params = model.trainable_parameters(include_beta=fixed_iters == 0)
        optimizer = self._optimizer(params, cfg)
        if resume is not None and cfg.optimizer == "adam":
            self._load_moments(optimizer, params, resume)

        def closure():
            optimizer.zero_grad()
            loss = -model.elbo()
            loss.backward()
            return loss

        previous = initial
        kind = cfg.optimizer
        rejected = 0
        for it in range(1, cfg.max_iters + 1):
            if it == fixed_iters + 1 and fixed_iters > 0:
                logger.info("Releasing beta after %d iterations", fixed_iters)
                params = model.trainable_parameters()
                optimizer = self._optimizer(params, cfg, kind)
            try:
                optimizer.step(closure)
                model.mark_updated()
                with torch.no_grad():
                    bound = float(model.elbo())
            except (NumericError, torch.linalg.LinAlgError) as exc:
                rejected += 1
                self._restore(model, best_state)
                if rejected >= MAX_REJECTED_STEPS:
                    logger.warning("Training aborted: %s", exc)
                    raise NonFiniteBoundError(
                        f"training aborted after {rejected} rejected steps: {exc}", trace=trace
                    ) from exc
                logger.warning("Rejected step %d (%s), continuing with adam from the best state", it, exc)
                kind = "adam"
                optimizer = self._optimizer(params, cfg, kind)
                continue
            rejected = 0
            grad_norm = math.sqrt(sum(
                float(p.grad.square().sum()) for p in params if p.grad is not None
            ))
            trace.append(self._row(it, bound, model, grad_norm, start))
            if it % cfg.log_every == 0:
                logger.info("iter %d bound %.6f beta %.4g |grad| %.3e",
                            it, bound, float(model.beta), grad_norm)
            if bound > best_bound:
                best_bound, best_state = bound, self._snapshot(model)
            if it > fixed_iters and abs(bound - previous) < cfg.tolerance * max(1.0, abs(previous)):
                result.converged = True
                logger.info("Converged after %d iterations, bound %.6f", it, bound)
                break
            previous = bound

        self._restore(model, best_state)
        model.is_trained = True
        if kind == "adam":
            result.moments = self._collect_moments(optimizer, model.trainable_parameters())
        result.final_bound = best_bound
        return result

    @staticmethod
    def _row(it: int, bound: float, model: SgplvmModel, grad_norm: float, start: float) -> Dict[str, float]:
        return {
            "iter": it,
            "bound": bound,
            "beta": float(model.beta),
            "grad_norm": grad_norm,
            "wall_ms": (time.perf_counter() - start) * 1000.0,
        }


training_service = TrainingService()
