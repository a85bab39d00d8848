import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch

from sgplvm.core.config import SynthParams
from sgplvm.models.case import TestCase, cases_from_images
from sgplvm.models.grid import ObservationGrid, pixel_coordinates
from sgplvm.numerics.kernels import FixedKernel, KernelFamily
from sgplvm.numerics.kron import KronMatrix, jittered_cholesky, kron_matmat
from sgplvm.utils.helpers import make_generator

logger = logging.getLogger(__name__)

SYNTH_JITTER = 1e-8


@dataclass
class SyntheticDataset:
    """
    Draw from the structured generative model, all images in ξ⊗s row order.

    Attributes:
        f: Noise-free function values, (n_xi · n_s) x d_y
        y: Noisy observations f + ε
        latents: n_xi x d_xi latent points the images were drawn at
        timestamps: Frame times for video data, else None
        xs_factors: Pixel coordinates per spatial axis
        params: Generator settings
    """

    f: torch.Tensor
    y: torch.Tensor
    latents: torch.Tensor
    timestamps: Optional[torch.Tensor]
    xs_factors: Tuple[torch.Tensor, ...]
    params: SynthParams

    @property
    def n_xi(self) -> int:
        return self.latents.shape[0]

    @property
    def n_s(self) -> int:
        return math.prod(x.shape[0] for x in self.xs_factors)

    def images(self, noisy: bool = True) -> torch.Tensor:
        """n_xi x n_s x d_y view."""
        values = self.y if noisy else self.f
        return values.reshape(self.n_xi, self.n_s, -1)


@dataclass
class SyntheticSplit:
    """Training grid plus masked test images with their indices in the full dataset."""

    train: ObservationGrid
    train_idx: torch.Tensor
    test_images: torch.Tensor
    test_idx: torch.Tensor
    test_times: Optional[torch.Tensor]
    mask: torch.Tensor


class SynthesisService:
    """Synthetic image and video datasets drawn from the model's own prior"""

    def generate(self, params: SynthParams, n_total: Optional[int] = None) -> SyntheticDataset:
        """
        Sample a dataset.

        gp_images draws iid latent points from N(0, I); dynamic_video draws
        every latent dimension from a temporal GP over frame times 0, 1, ....
        Images are then one joint draw f ~ GP(0, k_ξ ⊗ k_s) at those latents on
        a unit-spaced pixel grid, plus N(0, noise_var) noise.

        Args:
            params: Generator settings, seeded by params.seed
            n_total: Number of images, default n_train + n_test

        Returns:
            SyntheticDataset
        """
        generator = make_generator(params.seed)
        n = params.n_train + params.n_test if n_total is None else n_total
        d_xi = params.d_xi

        timestamps = None
        if params.kind == "dynamic_video":
            timestamps = torch.arange(n, dtype=torch.float64)
            temporal = FixedKernel(
                KernelFamily.ARD_RBF,
                torch.tensor(1.0, dtype=torch.float64),
                torch.tensor([params.temporal_lengthscale], dtype=torch.float64),
            )
            chol = jittered_cholesky(temporal.matrix(timestamps[:, None]), SYNTH_JITTER, name="temporal prior")
            latents = chol @ torch.randn(n, d_xi, dtype=torch.float64, generator=generator)
        else:
            latents = torch.randn(n, d_xi, dtype=torch.float64, generator=generator)

        xs = tuple(pixel_coordinates(s) for s in params.spatial_shape)
        factors = [self._latent_kernel(params).matrix(latents)]
        spatial = self._spatial_kernel(params)
        factors += [spatial.matrix(x) for x in xs]
        chol = KronMatrix(tuple(
            jittered_cholesky(K, SYNTH_JITTER, name=f"synthetic factor {i}") for i, K in enumerate(factors)
        ))
        n_s = math.prod(params.spatial_shape)
        eps = torch.randn(n * n_s, params.d_y, dtype=torch.float64, generator=generator)
        f = kron_matmat(chol, eps)
        noise = torch.randn(f.shape, dtype=torch.float64, generator=generator)
        y = f + math.sqrt(params.noise_var) * noise
        logger.info("Generated %s data: %d images of %s pixels", params.kind, n, tuple(params.spatial_shape))
        return SyntheticDataset(f, y, latents, timestamps, xs, params)

    @staticmethod
    def _latent_kernel(params: SynthParams) -> FixedKernel:
        return FixedKernel(
            KernelFamily.ARD_RBF,
            torch.tensor(1.0, dtype=torch.float64),
            torch.tensor([params.latent_lengthscale], dtype=torch.float64),
        )

    @staticmethod
    def _spatial_kernel(params: SynthParams) -> FixedKernel:
        return FixedKernel(
            KernelFamily(params.spatial_family),
            torch.tensor(1.0, dtype=torch.float64),
            torch.tensor([params.spatial_lengthscale], dtype=torch.float64),
        )

    def split(self, data: SyntheticDataset) -> SyntheticSplit:
        """
        Hold out n_test images and mask them.

        Image data hold out the last n_test images and hide a random
        missing_fraction of each one's pixels. Video data hold out n_test
        evenly spread interior frames, each one entirely missing.

        Returns:
            SyntheticSplit with mask 1 = observed, n_test x n_s
        """
        params = data.params
        n, n_test = data.n_xi, params.n_test
        generator = make_generator(params.seed + 1)
        if params.kind == "dynamic_video":
            held = torch.zeros(0, dtype=torch.long)
            if n_test:
                # first and last frames stay in training so held-out frames are interpolated
                held = torch.unique(torch.round(torch.linspace(1, max(n - 2, 1), n_test)).long())
            mask = torch.zeros(held.numel(), data.n_s, dtype=torch.float64)
        else:
            held = torch.arange(n - n_test, n)
            keep = torch.rand(n_test, data.n_s, dtype=torch.float64, generator=generator)
            mask = (keep >= params.missing_fraction).to(torch.float64)
        is_train = torch.ones(n, dtype=torch.bool)
        is_train[held] = False
        train_idx = torch.nonzero(is_train).reshape(-1)

        images = data.images()
        train = ObservationGrid(
            images[train_idx].reshape(-1, images.shape[-1]),
            data.xs_factors,
            train_idx.numel(),
            None if data.timestamps is None else data.timestamps[train_idx],
        )
        times = None if data.timestamps is None else data.timestamps[held]
        return SyntheticSplit(train, train_idx, images[held], held, times, mask)

    def test_cases(
        self,
        split: SyntheticSplit,
        y_mean: torch.Tensor,
        y_scale: torch.Tensor,
    ) -> List[TestCase]:
        """Standardized TestCases for the held-out images of a split."""
        return cases_from_images(
            split.test_images, split.mask, split.train.spatial_shape, y_mean, y_scale, split.test_times
        )


synthesis_service = SynthesisService()
