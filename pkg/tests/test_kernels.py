import math

import numpy as np
import pytest
import torch

from sgplvm.core.exceptions import InputError, ShapeError
from sgplvm.models.kernel import KernelSpec, TemporalKernelSpec
from sgplvm.numerics.kernels import FixedKernel, KernelFamily, kernel_grad_hyper, kernel_matrix


def _fixed(family, variance, ls):
    return FixedKernel(
        KernelFamily(family),
        torch.tensor(variance, dtype=torch.float64),
        torch.tensor(ls, dtype=torch.float64),
    )


class TestKernelValues:
    def test_rbf_known_value(self):
        k = _fixed("ard_rbf", 2.0, [1.0, 2.0])
        x1 = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
        x2 = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
        np.testing.assert_allclose(kernel_matrix(k, x1, x2), [[2.0 * math.exp(-1.0)]], rtol=1e-14)

    def test_matern_known_value(self):
        k = _fixed("matern32", 1.5, [2.0])
        x1 = torch.tensor([[0.0]], dtype=torch.float64)
        x2 = torch.tensor([[3.0]], dtype=torch.float64)
        r = math.sqrt(3.0) * 1.5
        np.testing.assert_allclose(kernel_matrix(k, x1, x2), [[1.5 * (1 + r) * math.exp(-r)]], rtol=1e-14)

    def test_matern_diagonal_is_variance(self):
        k = _fixed("matern32", 0.7, [1.0])
        x = torch.arange(4, dtype=torch.float64).reshape(-1, 1)
        np.testing.assert_allclose(kernel_matrix(k, x).diagonal(), 0.7, rtol=1e-14)

    def test_white_is_identity_only_on_same_inputs(self):
        k = _fixed("white", 3.0, [1.0])
        x = torch.arange(3, dtype=torch.float64).reshape(-1, 1)
        np.testing.assert_allclose(kernel_matrix(k, x), 3.0 * np.eye(3))
        np.testing.assert_allclose(kernel_matrix(k, x, x), 3.0 * np.eye(3))
        np.testing.assert_allclose(kernel_matrix(k, x, x.clone()), np.zeros((3, 3)))

    def test_shared_lengthscale_broadcasts(self):
        shared = _fixed("ard_rbf", 1.0, [1.3])
        ard = _fixed("ard_rbf", 1.0, [1.3, 1.3, 1.3])
        gen = torch.Generator().manual_seed(1)
        x = torch.randn(4, 3, dtype=torch.float64, generator=gen)
        np.testing.assert_allclose(kernel_matrix(shared, x), kernel_matrix(ard, x), rtol=1e-14)

    def test_dimension_mismatch(self):
        k = _fixed("ard_rbf", 1.0, [1.0, 1.0])
        with pytest.raises(ShapeError):
            kernel_matrix(k, torch.zeros(2, 3, dtype=torch.float64))
        with pytest.raises(ShapeError):
            kernel_matrix(k, torch.zeros(2, 2, dtype=torch.float64), torch.zeros(2, 1, dtype=torch.float64))


class TestKernelProperties:
    FAMILIES = [("ard_rbf", [0.7, 1.9]), ("matern32", [1.2, 0.5]), ("white", [1.0])]

    @staticmethod
    def _inputs(n, seed):
        gen = torch.Generator().manual_seed(seed)
        return 2.0 * torch.randn(n, 2, dtype=torch.float64, generator=gen)

    @pytest.mark.parametrize("family,ls", FAMILIES)
    def test_symmetric_and_positive_semidefinite(self, family, ls):
        k = _fixed(family, 1.4, ls)
        x = self._inputs(8, 0)
        K = kernel_matrix(k, x)
        np.testing.assert_array_equal(K, K.mT)
        assert float(torch.linalg.eigvalsh(K).min()) > -1e-12
        cross = kernel_matrix(k, x, self._inputs(5, 1))
        np.testing.assert_array_equal(kernel_matrix(k, self._inputs(5, 1), x), cross.mT)

    @pytest.mark.parametrize("family,ls", FAMILIES)
    def test_depends_only_on_differences(self, family, ls):
        k = _fixed(family, 1.4, ls)
        a, b = self._inputs(6, 2), self._inputs(4, 3)
        shift = torch.tensor([[0.75, -2.5]], dtype=torch.float64)
        np.testing.assert_allclose(kernel_matrix(k, a + shift, b + shift), kernel_matrix(k, a, b), atol=1e-12)
        np.testing.assert_allclose(kernel_matrix(k, a + shift), kernel_matrix(k, a), atol=1e-12)


class TestHyperGradients:
    @pytest.mark.parametrize("family,ls", [("ard_rbf", [0.8, 1.7]), ("matern32", [0.9, 1.4]), ("ard_rbf", [1.2])])
    def test_analytic_matches_autograd(self, family, ls):
        spec = KernelSpec(family, 1.3, ls, 2)
        gen = torch.Generator().manual_seed(2)
        X1 = torch.randn(4, 2, dtype=torch.float64, generator=gen)
        X2 = torch.randn(3, 2, dtype=torch.float64, generator=gen)
        grads = kernel_grad_hyper(spec, X1, X2)
        K = spec.matrix(X1, X2)
        for name, param in (("log_variance", spec.log_variance), ("log_lengthscales", spec.log_lengthscales)):
            jac = torch.stack([
                torch.autograd.grad(K.reshape(-1)[i], param, retain_graph=True)[0].reshape(-1)
                for i in range(K.numel())
            ])  # entries x params
            expected = jac.mT.reshape(-1, *K.shape)
            got = grads[name].reshape(-1, *K.shape)
            np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)

    def test_white_has_no_lengthscale_gradient(self):
        spec = KernelSpec("white", 2.0, [1.0], 1)
        grads = kernel_grad_hyper(spec, torch.zeros(3, 1, dtype=torch.float64))
        assert not spec.log_lengthscales.requires_grad
        np.testing.assert_array_equal(grads["log_lengthscales"], 0.0)


class TestKernelSpec:
    def test_rejects_bad_hyperparameters(self):
        with pytest.raises(InputError):
            KernelSpec("ard_rbf", -1.0, [1.0])
        with pytest.raises(InputError):
            KernelSpec("ard_rbf", 1.0, [1.0, 0.0], 2)
        with pytest.raises(InputError):
            KernelSpec("ard_rbf", 1.0, [1.0, 1.0, 1.0], 2)

    def test_temporal_cannot_be_white(self):
        with pytest.raises(InputError):
            TemporalKernelSpec("white")

    def test_frozen_copy_is_detached(self):
        spec = KernelSpec("matern32", 2.0, [1.5], 1)
        frozen = FixedKernel.frozen(spec)
        assert not frozen.variance.requires_grad
        np.testing.assert_allclose(float(frozen.variance), 2.0, rtol=1e-14)
