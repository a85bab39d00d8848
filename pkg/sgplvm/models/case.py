"""
Held-out test cases for latent inference and imputation.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch

from sgplvm.core.exceptions import InputError, ShapeError


@dataclass
class TestCase:
    """
    One partially observed image or frame.

    Attributes:
        y_star: n_o x d_y observed values (standardized units)
        observed_idx: Row indices of the observed points within the full spatial grid
        spatial_shape: Sizes of the spatial grid factors
        grid_factors: Optional test spatial coordinates, default the training grid
        t_star: Optional timestamp for the dynamical prior
        y_true: Optional full n_s x d_y ground truth, for evaluation only
    """

    __test__ = False

    y_star: torch.Tensor
    observed_idx: torch.Tensor
    spatial_shape: Tuple[int, ...]
    grid_factors: Optional[Tuple[torch.Tensor, ...]] = None
    t_star: Optional[float] = None
    y_true: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.y_star = torch.as_tensor(self.y_star, dtype=torch.float64)
        if self.y_star.dim() == 1:
            self.y_star = self.y_star[:, None]
        self.observed_idx = torch.as_tensor(self.observed_idx, dtype=torch.long).reshape(-1)
        self.spatial_shape = tuple(int(s) for s in self.spatial_shape)
        if self.y_star.shape[0] != self.observed_idx.shape[0]:
            raise ShapeError(
                f"{self.y_star.shape[0]} observed rows but {self.observed_idx.shape[0]} observed indices"
            )
        if bool(torch.isnan(self.y_star).any()):
            raise InputError("observed values must not contain NaN")
        if self.observed_idx.numel():
            if int(self.observed_idx.min()) < 0 or int(self.observed_idx.max()) >= self.n_s:
                raise ShapeError(f"observed indices out of range for {self.n_s} grid points")
            if torch.unique(self.observed_idx).numel() != self.observed_idx.numel():
                raise InputError("observed indices must be unique")
        if self.grid_factors is not None:
            sizes = tuple(g.shape[0] for g in self.grid_factors)
            if sizes != self.spatial_shape:
                raise ShapeError(f"grid factors have sizes {sizes}, expected {self.spatial_shape}")

    @classmethod
    def from_mask(
        cls,
        y_full: torch.Tensor,
        observed: torch.Tensor,
        spatial_shape: Tuple[int, ...],
        t_star: Optional[float] = None,
    ) -> "TestCase":
        """
        Build a case from a full n_s x d_y image and a boolean mask of observed points.
        """
        y_full = torch.as_tensor(y_full, dtype=torch.float64)
        if y_full.dim() == 1:
            y_full = y_full[:, None]
        observed = torch.as_tensor(observed, dtype=torch.bool).reshape(-1)
        if observed.shape[0] != y_full.shape[0]:
            raise ShapeError(f"mask has {observed.shape[0]} entries for {y_full.shape[0]} grid points")
        idx = torch.nonzero(observed).reshape(-1)
        return cls(y_full[idx], idx, spatial_shape, t_star=t_star, y_true=y_full)

    @property
    def n_s(self) -> int:
        return math.prod(self.spatial_shape)

    @property
    def n_observed(self) -> int:
        return self.observed_idx.shape[0]

    @property
    def missing_idx(self) -> torch.Tensor:
        mask = torch.ones(self.n_s, dtype=torch.bool)
        mask[self.observed_idx] = False
        return torch.nonzero(mask).reshape(-1)


def cases_from_images(
    images: torch.Tensor,
    observed: torch.Tensor,
    spatial_shape: Tuple[int, ...],
    y_mean: torch.Tensor,
    y_scale: torch.Tensor,
    times: Optional[torch.Tensor] = None,
) -> List[TestCase]:
    """
    Standardized TestCases from raw images.

    Args:
        images: n_cases x n_s x d_y raw values
        observed: n_cases x n_s mask, nonzero = observed
        spatial_shape: Sizes of the spatial grid factors
        y_mean, y_scale: Training standardization per channel
        times: Optional timestamp per case

    Raises:
        ShapeError: If the mask or times do not match the images
    """
    images = torch.as_tensor(images, dtype=torch.float64)
    observed = torch.as_tensor(observed).reshape(images.shape[0], -1) != 0
    if observed.shape[1] != images.shape[1]:
        raise ShapeError(f"mask covers {observed.shape[1]} points, images have {images.shape[1]}")
    if times is not None and len(times) != images.shape[0]:
        raise ShapeError(f"{len(times)} timestamps for {images.shape[0]} test cases")
    cases = []
    for i in range(images.shape[0]):
        y = (images[i] - y_mean) / y_scale
        t = None if times is None else float(times[i])
        cases.append(TestCase.from_mask(y, observed[i], spatial_shape, t_star=t))
    return cases
