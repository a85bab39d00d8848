import numpy as np
import pytest
import torch

from sgplvm.core.exceptions import InputError, ShapeError
from sgplvm.numerics.gaussian import LatentGaussian
from sgplvm.numerics.kernels import FixedKernel, KernelFamily
from sgplvm.numerics.psi import PSI2_CHUNK, psi0_rbf, psi1_rbf, psi2_rbf, structured_psi
from tests.oracle import dense_psi1, dense_psi2, mc_psi


def _kernel(variance=1.3, ls=(0.9, 1.6)):
    return FixedKernel(
        KernelFamily.ARD_RBF,
        torch.tensor(variance, dtype=torch.float64),
        torch.tensor(ls, dtype=torch.float64),
    )


def _latents(n=6, d=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    mean = torch.randn(n, d, dtype=torch.float64, generator=gen)
    var = 0.05 + 0.5 * torch.rand(n, d, dtype=torch.float64, generator=gen)
    z = 1.2 * torch.randn(4, d, dtype=torch.float64, generator=gen)
    return LatentGaussian(mean, var), z


class TestClosedForms:
    def test_psi1_matches_elementwise_formula(self):
        q, z = _latents()
        k = _kernel()
        expected = dense_psi1(q.mean.numpy(), q.variance.numpy(), z.numpy(), 1.3, np.array([0.9, 1.6]))
        np.testing.assert_allclose(psi1_rbf(q, z, k), expected, rtol=1e-12)

    def test_psi2_matches_elementwise_formula(self):
        q, z = _latents()
        k = _kernel()
        expected = dense_psi2(q.mean.numpy(), q.variance.numpy(), z.numpy(), 1.3, np.array([0.9, 1.6]))
        np.testing.assert_allclose(psi2_rbf(q, z, k), expected, rtol=1e-11)

    def test_psi0(self):
        q, _ = _latents(n=7)
        np.testing.assert_allclose(psi0_rbf(q, _kernel()), 7 * 1.3, rtol=1e-14)

    def test_zero_variance_reduces_to_kernel(self):
        q, z = _latents()
        point = LatentGaussian(q.mean, torch.zeros_like(q.variance))
        k = _kernel()
        K = k.matrix(q.mean, z)
        np.testing.assert_allclose(psi1_rbf(point, z, k), K, rtol=1e-12)
        np.testing.assert_allclose(psi2_rbf(point, z, k), K.mT @ K, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_psi1_shrinks_as_variances_grow(self, seed):
        # every mean lies within a lengthscale of every inducing input, where
        # widening q lowers the expected kernel value
        gen = torch.Generator().manual_seed(seed)
        mean = 0.6 * torch.rand(5, 2, dtype=torch.float64, generator=gen) - 0.3
        z = 0.6 * torch.rand(4, 2, dtype=torch.float64, generator=gen) - 0.3
        var = 0.05 + 0.5 * torch.rand(5, 2, dtype=torch.float64, generator=gen)
        k = _kernel()
        values = [psi1_rbf(LatentGaussian(mean, scale * var), z, k) for scale in (0.0, 1.0, 2.0, 4.0)]
        for narrow, wide in zip(values, values[1:]):
            assert bool(torch.all(wide < narrow))

    def test_psi2_symmetric_psd(self):
        q, z = _latents(n=10)
        P = psi2_rbf(q, z, _kernel())
        np.testing.assert_allclose(P, P.mT, rtol=1e-14)
        assert float(torch.linalg.eigvalsh(P).min()) > -1e-12

    def test_chunked_accumulation(self):
        n = PSI2_CHUNK + 17
        gen = torch.Generator().manual_seed(4)
        q = LatentGaussian(
            torch.randn(n, 2, dtype=torch.float64, generator=gen),
            0.2 * torch.ones(n, 2, dtype=torch.float64),
        )
        z = torch.randn(3, 2, dtype=torch.float64, generator=gen)
        k = _kernel()
        head = LatentGaussian(q.mean[:PSI2_CHUNK], q.variance[:PSI2_CHUNK])
        tail = LatentGaussian(q.mean[PSI2_CHUNK:], q.variance[PSI2_CHUNK:])
        np.testing.assert_allclose(
            psi2_rbf(q, z, k), psi2_rbf(head, z, k) + psi2_rbf(tail, z, k), rtol=1e-12
        )

    def test_negative_variance_rejected(self):
        q, z = _latents()
        bad = LatentGaussian(q.mean, -q.variance)
        with pytest.raises(InputError):
            psi1_rbf(bad, z, _kernel())

    def test_non_rbf_rejected(self):
        q, z = _latents()
        k = FixedKernel(KernelFamily.MATERN32, torch.tensor(1.0, dtype=torch.float64),
                        torch.tensor([1.0], dtype=torch.float64))
        with pytest.raises(InputError):
            psi1_rbf(q, z, k)

    def test_inducing_dimension_mismatch(self):
        q, _ = _latents()
        with pytest.raises(ShapeError):
            psi1_rbf(q, torch.zeros(3, 3, dtype=torch.float64), _kernel())


class TestMonteCarlo:
    def test_closed_forms_within_four_standard_errors(self):
        q, z = _latents(n=3, seed=5)
        k = _kernel()
        mc = mc_psi(q.mean.numpy(), q.variance.numpy(), z.numpy(), k, n_samples=20000, seed=11)
        psi1 = psi1_rbf(q, z, k).numpy()
        psi2 = psi2_rbf(q, z, k).numpy()
        assert np.all(np.abs(psi1 - mc.psi1) <= 4.0 * mc.psi1_se + 1e-12)
        assert np.all(np.abs(psi2 - mc.psi2) <= 4.0 * mc.psi2_se + 1e-12)


class TestStructured:
    def test_factors_and_psi0(self):
        q, z = _latents(n=3)
        latent = _kernel()
        spatial = FixedKernel(KernelFamily.MATERN32, torch.tensor(0.8, dtype=torch.float64),
                              torch.tensor([1.5], dtype=torch.float64))
        xs = [torch.arange(4, dtype=torch.float64).reshape(-1, 1)]
        zs = [torch.tensor([[0.5], [2.5]], dtype=torch.float64)]
        psi = structured_psi(q, z, zs, xs, latent, [spatial])
        kfu = spatial.matrix(xs[0], zs[0])
        np.testing.assert_allclose(psi.psi0_full, 3 * 1.3 * 4 * 0.8, rtol=1e-14)
        np.testing.assert_allclose(psi.psi1.factors[1], kfu)
        np.testing.assert_allclose(psi.psi2.factors[1], kfu.mT @ kfu)
        assert psi.psi1.shape == (12, 8)

    def test_factor_count_mismatch(self):
        q, z = _latents(n=3)
        spatial = _kernel(ls=(1.0,))
        with pytest.raises(ShapeError):
            structured_psi(q, z, [torch.zeros(2, 1, dtype=torch.float64)], [], _kernel(), [spatial])
