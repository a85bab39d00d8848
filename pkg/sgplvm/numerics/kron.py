"""
Kronecker-product linear algebra.

A ``KronMatrix`` represents A_1 ⊗ ... ⊗ A_k without materializing it. Row
index r of a represented vector maps to the multi-index (i_1, ..., i_k) in
row-major order, i.e. the last factor varies fastest. With factors ordered
(latent, spatial...) this is the ξ⊗s convention every data matrix follows.

All functions are pure and operate on float64 torch tensors so that autograd
flows through them.
"""
import logging
import math
from dataclasses import dataclass
from functools import reduce
from typing import Optional, Sequence, Tuple

import torch

from sgplvm.core.exceptions import (
    DecompositionError,
    InputError,
    ShapeError,
    SingularMatrixError,
)

logger = logging.getLogger(__name__)

JITTER_START = 1e-8
JITTER_STEPS = 7  # 1e-8 ... 1e-2 times the mean diagonal
SYMMETRY_TOL = 1e-8


@dataclass(frozen=True)
class KronMatrix:
    """
    Lazy Kronecker product of dense factors.

    Attributes:
        factors: Non-empty tuple of 2-D tensors [A_1, ..., A_k]
    """

    factors: Tuple[torch.Tensor, ...]

    def __post_init__(self):
        factors = tuple(self.factors)
        if not factors:
            raise ShapeError("KronMatrix needs at least one factor")
        for i, f in enumerate(factors):
            if f.dim() != 2:
                raise ShapeError(f"Kronecker factor {i} must be 2-D, got shape {tuple(f.shape)}")
        object.__setattr__(self, "factors", factors)

    @classmethod
    def of(cls, *factors: torch.Tensor) -> "KronMatrix":
        return cls(tuple(factors))

    @property
    def row_sizes(self) -> Tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def col_sizes(self) -> Tuple[int, ...]:
        return tuple(f.shape[1] for f in self.factors)

    @property
    def shape(self) -> Tuple[int, int]:
        return math.prod(self.row_sizes), math.prod(self.col_sizes)

    @property
    def is_square(self) -> bool:
        return self.row_sizes == self.col_sizes

    def transpose(self) -> "KronMatrix":
        return KronMatrix(tuple(f.mT for f in self.factors))

    def dense(self) -> torch.Tensor:
        """Materialize the full product. Intended for small instances and tests."""
        return reduce(torch.kron, self.factors)

    def __len__(self) -> int:
        return len(self.factors)

    def __repr__(self) -> str:
        sizes = " x ".join(f"{r}x{c}" for r, c in zip(self.row_sizes, self.col_sizes))
        return f"<KronMatrix({sizes})>"


@dataclass(frozen=True)
class KronEig:
    """
    Factored symmetric eigendecomposition Q Λ Qᵀ with Q = ⊗Q_i, Λ = ⊗Λ_i.

    Attributes:
        q_factors: Orthogonal eigenvector matrices, one per factor
        lambda_factors: Eigenvalue vectors, one per factor
    """

    q_factors: Tuple[torch.Tensor, ...]
    lambda_factors: Tuple[torch.Tensor, ...]

    @property
    def sizes(self) -> Tuple[int, ...]:
        return tuple(len(lam) for lam in self.lambda_factors)

    def q(self) -> KronMatrix:
        return KronMatrix(self.q_factors)

    def eigenvalues(self) -> torch.Tensor:
        """Products of factor eigenvalues in Kronecker order."""
        return kron_vector(self.lambda_factors)

    def reconstruct(self) -> torch.Tensor:
        """Dense Q diag(λ) Qᵀ, for verification only."""
        parts = [(q * lam) @ q.mT for q, lam in zip(self.q_factors, self.lambda_factors)]
        return reduce(torch.kron, parts)


@dataclass(frozen=True)
class DiagPlusConst:
    """
    Diagonal matrix const·I + diag(diag), stored as a vector and a scalar.

    Attributes:
        diag: Length-m vector (eigenvalue products)
        const: Scalar added to every entry (β⁻¹)
    """

    diag: torch.Tensor
    const: torch.Tensor

    def __post_init__(self):
        values = self.values()
        if values.numel() and not bool(torch.all(values > 0)):
            raise InputError(
                f"const + diag must be strictly positive, min is {values.min().item():.3e}"
            )

    def values(self) -> torch.Tensor:
        return self.const + self.diag

    def inverse(self) -> torch.Tensor:
        return 1.0 / self.values()

    def logdet(self) -> torch.Tensor:
        return torch.log(self.values()).sum()


def kron_vector(vectors: Sequence[torch.Tensor]) -> torch.Tensor:
    """Kronecker product of 1-D tensors."""
    return reduce(torch.kron, vectors)


def _check_square(K: KronMatrix, op: str) -> None:
    for i, f in enumerate(K.factors):
        if f.shape[0] != f.shape[1]:
            raise ShapeError(f"{op}: factor {i} is not square, shape {tuple(f.shape)}")


def kron_matmat(K: KronMatrix, M: torch.Tensor) -> torch.Tensor:
    """
    Compute dense(K) @ M one factor at a time.

    Args:
        K: Kronecker matrix with column count c
        M: c x d matrix

    Returns:
        r x d matrix

    Raises:
        ShapeError: If M has the wrong number of rows
    """
    rows, cols = K.shape
    if M.dim() != 2 or M.shape[0] != cols:
        raise ShapeError(f"kron_matmat: expected {cols} x d matrix, got {tuple(M.shape)}")
    d = M.shape[1]
    X = M.reshape(*K.col_sizes, d)
    for axis, A in enumerate(K.factors):
        X = torch.tensordot(A, X, dims=([1], [axis]))
        X = torch.movedim(X, 0, axis)
    return X.reshape(rows, d)


def kron_matvec(K: KronMatrix, v: torch.Tensor) -> torch.Tensor:
    """
    Compute dense(K) @ v without forming dense(K).

    Raises:
        ShapeError: If v is not a vector of the column count of K
    """
    if v.dim() != 1 or v.shape[0] != K.shape[1]:
        raise ShapeError(f"kron_matvec: expected vector of length {K.shape[1]}, got {tuple(v.shape)}")
    return kron_matmat(K, v[:, None])[:, 0]


def jittered_cholesky(A: torch.Tensor, jitter: float = 0.0, name: str = "matrix") -> torch.Tensor:
    """
    Lower Cholesky factor of A + jitter·I, escalating the jitter on failure.

    The first attempt uses the requested jitter. After a failure an extra
    1e-8 x mean(diag) is added and multiplied by 10 per retry up to
    1e-2 x mean(diag).

    Raises:
        DecompositionError: If every attempt fails
    """
    n = A.shape[-1]
    if n == 0:
        return A.clone()
    eye = torch.eye(n, dtype=A.dtype, device=A.device)
    L, info = torch.linalg.cholesky_ex(A + jitter * eye)
    if not bool(torch.any(info)):
        return L
    scale = float(A.detach().diagonal(dim1=-2, dim2=-1).mean().abs())
    scale = scale if scale > 0 and math.isfinite(scale) else 1.0
    extra = 0.0
    for step in range(JITTER_STEPS):
        extra = JITTER_START * 10.0**step * scale
        L, info = torch.linalg.cholesky_ex(A + (jitter + extra) * eye)
        if not bool(torch.any(info)):
            logger.debug("Cholesky of %s needed extra jitter %.1e", name, extra)
            return L
    raise DecompositionError(f"{name} is not positive definite even with jitter {jitter + extra:.1e}")


def factored_cholesky(K: KronMatrix, jitter: float = 0.0) -> KronMatrix:
    """
    Per-factor Cholesky: (⊗L_i)(⊗L_i)ᵀ = ⊗(K_i + jitter·I).

    Args:
        K: Kronecker matrix with symmetric factors
        jitter: Non-negative diagonal jitter added to each factor

    Returns:
        Kronecker matrix of lower-triangular factors

    Raises:
        InputError: If jitter is negative
        DecompositionError: If a factor is not positive definite
    """
    if jitter < 0:
        raise InputError(f"jitter must be non-negative, got {jitter}")
    _check_square(K, "factored_cholesky")
    return KronMatrix(tuple(
        jittered_cholesky(f, jitter, name=f"Kronecker factor {i}") for i, f in enumerate(K.factors)
    ))


def factored_eig_sym(K: KronMatrix) -> KronEig:
    """
    Per-factor symmetric eigendecomposition.

    Raises:
        InputError: If a factor is asymmetric beyond 1e-8
    """
    _check_square(K, "factored_eig_sym")
    qs, lams = [], []
    for i, f in enumerate(K.factors):
        if f.numel():
            asym = float((f - f.mT).abs().max())
            if asym > SYMMETRY_TOL * max(1.0, float(f.abs().max())):
                raise InputError(f"Kronecker factor {i} is not symmetric (max asymmetry {asym:.2e})")
        lam, q = torch.linalg.eigh(0.5 * (f + f.mT))
        qs.append(q)
        lams.append(lam)
    return KronEig(tuple(qs), tuple(lams))


def kron_tri_solve(L: KronMatrix, B: torch.Tensor, transpose: bool = False) -> torch.Tensor:
    """
    Solve dense(L) X = B (or dense(L)ᵀ X = B) factor by factor.

    Args:
        L: Kronecker matrix of lower-triangular factors
        B: Right-hand side, rows equal to the size of L
        transpose: Solve with Lᵀ instead of L

    Returns:
        Solution with the shape of B

    Raises:
        ShapeError: On non-square factors or mismatched B
        SingularMatrixError: If a factor has a zero diagonal entry
    """
    _check_square(L, "kron_tri_solve")
    rows = L.shape[0]
    if B.dim() != 2 or B.shape[0] != rows:
        raise ShapeError(f"kron_tri_solve: expected {rows} x d right-hand side, got {tuple(B.shape)}")
    for i, f in enumerate(L.factors):
        if f.numel() and bool(torch.any(f.diagonal() == 0)):
            raise SingularMatrixError(f"triangular factor {i} has a zero diagonal entry")
    d = B.shape[1]
    X = B.reshape(*L.row_sizes, d)
    for axis, f in enumerate(L.factors):
        Xa = torch.movedim(X, axis, 0)
        shape = Xa.shape
        flat = Xa.reshape(shape[0], math.prod(shape[1:]))
        A = f.mT if transpose else f
        flat = torch.linalg.solve_triangular(A, flat, upper=transpose)
        X = torch.movedim(flat.reshape(shape), 0, axis)
    return X.reshape(rows, d)


def kron_diag(K: KronMatrix) -> torch.Tensor:
    """Diagonal of a square Kronecker matrix."""
    _check_square(K, "kron_diag")
    return kron_vector([f.diagonal() for f in K.factors])


def kron_trace(K: KronMatrix) -> torch.Tensor:
    _check_square(K, "kron_trace")
    return reduce(torch.mul, [f.diagonal().sum() for f in K.factors])


def kron_logdet(K: KronMatrix) -> torch.Tensor:
    """
    log det(⊗K_i) = Σ_i (m / m_i) log det(K_i) for positive definite factors.

    Raises:
        InputError: If a factor has a non-positive determinant
    """
    _check_square(K, "kron_logdet")
    m = K.shape[0]
    total = torch.zeros((), dtype=K.factors[0].dtype)
    for i, f in enumerate(K.factors):
        sign, logabs = torch.linalg.slogdet(f)
        if float(sign) <= 0:
            raise InputError(f"Kronecker factor {i} is not positive definite")
        total = total + (m // f.shape[0]) * logabs
    return total


def kron_rows(K: KronMatrix, rows: torch.Tensor) -> torch.Tensor:
    """
    Dense rows of dense(K) selected by index (face-splitting product).

    Args:
        K: Kronecker matrix
        rows: 1-D integer tensor of row indices

    Returns:
        len(rows) x (column count) matrix
    """
    rows = torch.as_tensor(rows, dtype=torch.long)
    n_rows = K.shape[0]
    if rows.numel() and (int(rows.min()) < 0 or int(rows.max()) >= n_rows):
        raise ShapeError(f"kron_rows: row index out of range for {n_rows} rows")
    remaining = rows.clone()
    indices = []
    for size in reversed(K.row_sizes):
        indices.append(remaining % size)
        remaining = remaining // size
    indices.reverse()
    out = K.factors[0][indices[0]]
    for f, idx in zip(K.factors[1:], indices[1:]):
        block = f[idx]
        out = (out[:, :, None] * block[:, None, :]).reshape(len(rows), out.shape[1] * block.shape[1])
    return out


def _apply_others(factors: Sequence[torch.Tensor], skip: int, X: torch.Tensor) -> torch.Tensor:
    eye = torch.eye(factors[skip].shape[0], dtype=X.dtype)
    mixed = tuple(eye if j == skip else f for j, f in enumerate(factors))
    return kron_matmat(KronMatrix(mixed), X)


def _unfold(X: torch.Tensor, sizes: Tuple[int, ...], axis: int) -> torch.Tensor:
    T = torch.movedim(X.reshape(*sizes, X.shape[-1]), axis, 0)
    return T.reshape(sizes[axis], -1)


class _KronSpectralTerms(torch.autograd.Function):
    """
    (log det A, tr(Wᵀ A⁻¹ W)) for A = s·I + ⊗C_i.

    The backward pass works in the factored eigenbasis and never divides by
    eigenvalue gaps, so it is exact when eigenvalues repeat.
    """

    @staticmethod
    def forward(ctx, eig, noise, W, *c_factors):
        c_sym = tuple(0.5 * (c + c.mT) for c in c_factors)
        if eig is None:
            eig = factored_eig_sym(KronMatrix(c_sym))
        d = noise + eig.eigenvalues()
        B = kron_matmat(eig.q().transpose(), W)
        logdet = torch.log(d).sum()
        quad = (B.square() / d[:, None]).sum()
        ctx.eig, ctx.d, ctx.B, ctx.c_sym = eig, d, B, c_sym
        return logdet, quad

    @staticmethod
    @torch.autograd.function.once_differentiable
    def backward(ctx, g_logdet, g_quad):
        eig, d, B, c_sym = ctx.eig, ctx.d, ctx.B, ctx.c_sym
        sizes = eig.sizes
        k = len(sizes)
        dinv = 1.0 / d
        V = kron_matmat(eig.q(), B * dinv[:, None])
        grads = []
        for i in range(k):
            w = dinv.reshape(sizes)
            for j in range(k):
                if j != i:
                    shape = [1] * k
                    shape[j] = sizes[j]
                    w = w * eig.lambda_factors[j].reshape(shape)
            other_axes = [j for j in range(k) if j != i]
            if other_axes:
                w = w.sum(dim=other_axes)
            q = eig.q_factors[i]
            g_ld = (q * w) @ q.mT
            U = _apply_others(c_sym, i, V)
            g_q = -_unfold(V, sizes, i) @ _unfold(U, sizes, i).mT
            g_q = 0.5 * (g_q + g_q.mT)
            grads.append(g_logdet * g_ld + g_quad * g_q)
        g_noise = g_logdet * dinv.sum() - g_quad * (B.square() * dinv[:, None].square()).sum()
        g_W = g_quad * 2.0 * V
        return (None, g_noise, g_W, *grads)


def kron_spectral_terms(
    c_factors: Sequence[torch.Tensor],
    noise: torch.Tensor,
    W: torch.Tensor,
    eig: Optional[KronEig] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    log det(s·I + ⊗C_i) and tr(Wᵀ (s·I + ⊗C_i)⁻¹ W).

    Args:
        c_factors: Symmetric PSD factors C_i
        noise: Scalar s > 0
        W: m x d matrix
        eig: Precomputed decomposition of the factors, reused if given

    Returns:
        Tuple of (log det, quadratic trace), both differentiable
    """
    noise = torch.as_tensor(noise, dtype=W.dtype)
    return _KronSpectralTerms.apply(eig, noise, W, *c_factors)
