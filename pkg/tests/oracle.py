"""
Dense reference implementations for the tests.

Everything here materializes full matrices with numpy/scipy and shares no
code with the structured implementation except the kernel functions. Slow by
construction: keep instances small.
"""
from dataclasses import dataclass
from functools import reduce
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import linalg

from sgplvm.numerics.kernels import FixedKernel, kernel_matrix

LOG_2PI = np.log(2.0 * np.pi)


def kmat(spec, X1: torch.Tensor, X2: Optional[torch.Tensor] = None) -> np.ndarray:
    with torch.no_grad():
        return kernel_matrix(spec, X1, X2).numpy().copy()


def dense_kron(factors: Sequence[np.ndarray]) -> np.ndarray:
    return reduce(np.kron, factors)


# Psi statistics

def dense_psi1(mean: np.ndarray, var: np.ndarray, Z: np.ndarray, variance: float, ls: np.ndarray) -> np.ndarray:
    n, d = mean.shape
    ls2 = np.broadcast_to(np.asarray(ls, dtype=float) ** 2, (d,))
    out = np.empty((n, Z.shape[0]))
    for i in range(n):
        for k in range(Z.shape[0]):
            value = variance
            for q in range(d):
                value *= (1.0 + var[i, q] / ls2[q]) ** -0.5
                value *= np.exp(-0.5 * (mean[i, q] - Z[k, q]) ** 2 / (ls2[q] + var[i, q]))
            out[i, k] = value
    return out


def dense_psi2(mean: np.ndarray, var: np.ndarray, Z: np.ndarray, variance: float, ls: np.ndarray) -> np.ndarray:
    n, d = mean.shape
    m = Z.shape[0]
    ls2 = np.broadcast_to(np.asarray(ls, dtype=float) ** 2, (d,))
    out = np.zeros((m, m))
    for i in range(n):
        for k in range(m):
            for l in range(m):
                value = variance ** 2
                for q in range(d):
                    zbar = 0.5 * (Z[k, q] + Z[l, q])
                    value *= (1.0 + 2.0 * var[i, q] / ls2[q]) ** -0.5
                    value *= np.exp(
                        -((Z[k, q] - Z[l, q]) ** 2) / (4.0 * ls2[q])
                        - (mean[i, q] - zbar) ** 2 / (ls2[q] + 2.0 * var[i, q])
                    )
                out[k, l] += value
    return out


@dataclass
class McPsi:
    psi1: np.ndarray
    psi2: np.ndarray
    psi1_se: np.ndarray
    psi2_se: np.ndarray


def mc_psi(mean: np.ndarray, var: np.ndarray, Z: np.ndarray, spec, n_samples: int, seed: int) -> McPsi:
    """Monte-Carlo estimates of Ψ₁ and Ψ₂ with elementwise standard errors."""
    rng = np.random.default_rng(seed)
    n, d = mean.shape
    m = Z.shape[0]
    psi1 = np.empty((n, m))
    psi1_se = np.empty((n, m))
    psi2_terms = np.zeros((n_samples, m, m))
    z = torch.from_numpy(Z)
    for i in range(n):
        x = mean[i] + rng.standard_normal((n_samples, d)) * np.sqrt(var[i])
        k = kmat(spec, torch.from_numpy(x), z)  # samples x m
        psi1[i] = k.mean(0)
        psi1_se[i] = k.std(0, ddof=1) / np.sqrt(n_samples)
        psi2_terms += k[:, :, None] * k[:, None, :]
    psi2 = psi2_terms.mean(0)
    psi2_se = psi2_terms.std(0, ddof=1) / np.sqrt(n_samples)
    return McPsi(psi1, psi2, psi1_se, psi2_se)


# Model state

@dataclass
class DenseModelState:
    """A model's parameters as plain arrays plus frozen kernels."""

    y: np.ndarray
    xs: List[torch.Tensor]
    z_xi: np.ndarray
    z_s: List[torch.Tensor]
    latent: FixedKernel
    spatial: List[FixedKernel]
    beta: float
    jitter: float
    q_mean: np.ndarray
    q_var: np.ndarray
    kl: float

    @classmethod
    def from_model(cls, model) -> "DenseModelState":
        latent = FixedKernel.frozen(model.latent_kernel)
        spatial = [FixedKernel.frozen(k) for k in model.spatial_kernels]
        q = model.q_latent
        with torch.no_grad():
            if q.is_dynamical:
                temporal = FixedKernel.frozen(model.temporal)
                mean, var, kl = dense_dynamical(
                    q.mu.numpy(), q.lam.numpy(), q.timestamps, temporal, model.jitter
                )
            else:
                mean, var = q.mu.numpy().copy(), torch.exp(q.log_var).numpy().copy()
                kl = dense_kl_iid(mean, var)
            return cls(
                y=model.grid.y.numpy().copy(),
                xs=list(model.grid.xs_factors),
                z_xi=model.z_xi.detach().numpy().copy(),
                z_s=[z.detach() if isinstance(z, torch.nn.Parameter) else z for z in model.z_s],
                latent=latent,
                spatial=spatial,
                beta=float(model.beta),
                jitter=model.jitter,
                q_mean=mean,
                q_var=var,
                kl=kl,
            )

    def kuu(self) -> np.ndarray:
        factors = [kmat(self.latent, torch.from_numpy(self.z_xi))]
        factors += [kmat(k, z) for k, z in zip(self.spatial, self.z_s)]
        return dense_kron([f + self.jitter * np.eye(f.shape[0]) for f in factors])

    def psi(self) -> Tuple[float, np.ndarray, np.ndarray]:
        variance = float(self.latent.variance)
        ls = self.latent.lengthscales.numpy()
        p1 = [dense_psi1(self.q_mean, self.q_var, self.z_xi, variance, ls)]
        p2 = [dense_psi2(self.q_mean, self.q_var, self.z_xi, variance, ls)]
        psi0 = self.q_mean.shape[0] * variance
        for k, x, z in zip(self.spatial, self.xs, self.z_s):
            kfu = kmat(k, x, z)
            p1.append(kfu)
            p2.append(kfu.T @ kfu)
            psi0 *= np.trace(kmat(k, x))
        return psi0, dense_kron(p1), dense_kron(p2)


def dense_kl_iid(mean: np.ndarray, var: np.ndarray) -> float:
    return float(0.5 * np.sum(mean ** 2 + var - np.log(var) - 1.0))


def dense_dynamical(mu_bar: np.ndarray, lam: np.ndarray, t: torch.Tensor, temporal, jitter: float):
    """Marginal means, variances and KL of the dynamical posterior, by dense inverses."""
    n, d = mu_bar.shape
    K = kmat(temporal, t.reshape(-1, 1)) + jitter * np.eye(n)
    K_inv = np.linalg.inv(K)
    mean = K @ mu_bar
    var = np.empty((n, d))
    kl = 0.0
    _, logdet_k = np.linalg.slogdet(K)
    for j in range(d):
        S = np.linalg.inv(K_inv + np.diag(lam[:, j]))
        var[:, j] = np.diag(S)
        _, logdet_s = np.linalg.slogdet(S)
        kl += 0.5 * (np.trace(K_inv @ S) + mean[:, j] @ K_inv @ mean[:, j] - n + logdet_k - logdet_s)
    return mean, var, kl


# Bounds

def dense_collapsed_bound(state: DenseModelState) -> float:
    y, beta = state.y, state.beta
    n, d = y.shape
    kuu = state.kuu()
    psi0, psi1, psi2 = state.psi()
    A = kuu + beta * psi2
    _, logdet_kuu = np.linalg.slogdet(kuu)
    _, logdet_a = np.linalg.slogdet(A)
    proj = psi1.T @ y
    quad = np.sum(proj * linalg.solve(A, proj, assume_a="pos"))
    bound = 0.5 * d * (n * np.log(beta) - n * LOG_2PI + logdet_kuu - logdet_a)
    bound += -0.5 * beta * np.sum(y ** 2) + 0.5 * beta ** 2 * quad
    bound += -0.5 * beta * d * (psi0 - np.trace(linalg.solve(kuu, psi2, assume_a="pos")))
    return float(bound - state.kl)


def optimal_inducing(state: DenseModelState) -> Tuple[np.ndarray, np.ndarray]:
    kuu = state.kuu()
    _, psi1, psi2 = state.psi()
    A = kuu + state.beta * psi2
    mean = state.beta * kuu @ linalg.solve(A, psi1.T @ state.y, assume_a="pos")
    cov = kuu @ linalg.solve(A, kuu, assume_a="pos")
    return mean, 0.5 * (cov + cov.T)


def dense_uncollapsed_bound(state: DenseModelState, u_mean: np.ndarray, u_cov: np.ndarray) -> float:
    """Bound with an explicit Gaussian q(U) shared across output channels."""
    y, beta = state.y, state.beta
    n, d = y.shape
    m = u_mean.shape[0]
    kuu = state.kuu()
    psi0, psi1, psi2 = state.psi()
    kinv = np.linalg.inv(kuu)
    a = kinv @ u_mean
    expected = (
        np.sum(y ** 2)
        - 2.0 * np.sum(y * (psi1 @ a))
        + np.sum(a * (psi2 @ a))
        + d * np.trace(kinv @ psi2 @ kinv @ u_cov)
    )
    bound = -0.5 * n * d * (LOG_2PI - np.log(beta)) - 0.5 * beta * expected
    bound -= 0.5 * beta * d * (psi0 - np.trace(kinv @ psi2))
    _, logdet_kuu = np.linalg.slogdet(kuu)
    _, logdet_cov = np.linalg.slogdet(u_cov)
    kl_u = 0.5 * (d * np.trace(kinv @ u_cov) + np.sum(u_mean * a) - m * d + d * logdet_kuu - d * logdet_cov)
    return float(bound - kl_u - state.kl)


# Prediction

def dense_predict(state: DenseModelState, x_star: np.ndarray, grid: Optional[Sequence[torch.Tensor]] = None):
    """Projected-process mean and marginal variance at latent points over a spatial grid."""
    grid = state.xs if grid is None else list(grid)
    kuu = state.kuu()
    _, psi1, psi2 = state.psi()
    A = kuu + state.beta * psi2
    cross = [kmat(state.latent, torch.from_numpy(x_star), torch.from_numpy(state.z_xi))]
    cross += [kmat(k, x, z) for k, x, z in zip(state.spatial, grid, state.z_s)]
    k_star = dense_kron(cross)
    mean = state.beta * k_star @ linalg.solve(A, psi1.T @ state.y, assume_a="pos")
    prior = dense_kron([np.diag(kmat(state.latent, torch.from_numpy(x_star)))] + [
        np.diag(kmat(k, x)) for k, x in zip(state.spatial, grid)
    ])
    var = (
        prior
        - np.sum(k_star * linalg.solve(kuu, k_star.T, assume_a="pos").T, axis=1)
        + np.sum(k_star * linalg.solve(A, k_star.T, assume_a="pos").T, axis=1)
    )
    return mean, var


def dense_test_bound(
    state: DenseModelState,
    y_star: np.ndarray,
    observed: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    prior_mean: np.ndarray,
    prior_var: np.ndarray,
) -> float:
    """Test-row terms of the uncollapsed bound at the optimal q(U), by dense algebra."""
    u_mean, u_cov = optimal_inducing(state)
    kinv = np.linalg.inv(state.kuu())
    variance = float(state.latent.variance)
    ls = state.latent.lengthscales.numpy()
    p1_xi = dense_psi1(mean, var, state.z_xi, variance, ls)
    p2_xi = dense_psi2(mean, var, state.z_xi, variance, ls)
    k_os = dense_kron([kmat(k, x, z) for k, x, z in zip(state.spatial, state.xs, state.z_s)])[observed]
    diag_s = dense_kron([np.diag(kmat(k, x)) for k, x in zip(state.spatial, state.xs)])[observed]
    psi0 = variance * diag_s.sum()
    psi1 = np.kron(p1_xi, k_os)
    psi2 = np.kron(p2_xi, k_os.T @ k_os)

    beta = state.beta
    n_o, d = y_star.shape
    a = kinv @ u_mean
    expected = (
        np.sum(y_star ** 2)
        - 2.0 * np.sum(y_star * (psi1 @ a))
        + np.sum(a * (psi2 @ a))
        + d * np.trace(kinv @ psi2 @ kinv @ u_cov)
    )
    bound = -0.5 * n_o * d * (LOG_2PI - np.log(beta)) - 0.5 * beta * expected
    bound -= 0.5 * beta * d * (psi0 - np.trace(kinv @ psi2))
    kl = 0.5 * np.sum(
        (var + (mean - prior_mean) ** 2) / prior_var - 1.0 - np.log(var) + np.log(prior_var)
    )
    return float(bound - kl)
