"""
Observation grid: a data matrix whose rows follow the (latent index x spatial grid)
Cartesian product.
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch

from sgplvm.core.exceptions import InputError, ShapeError


def as_float64(value) -> torch.Tensor:
    return torch.as_tensor(value, dtype=torch.float64)


def pixel_coordinates(size: int) -> torch.Tensor:
    """Unit-spaced integer pixel centres 0, 1, ..., size - 1 as a size x 1 column."""
    return torch.arange(size, dtype=torch.float64).reshape(-1, 1)


@dataclass
class ObservationGrid:
    """
    Training data in ξ⊗s row order.

    Row r of y holds latent index r // n_s and spatial index r % n_s, where the
    spatial index itself is row-major over the spatial factors.

    Attributes:
        y: n x d_y observations, n = n_xi · n_s
        xs_factors: Spatial coordinates, one n_si x d_si matrix per factor
        n_xi: Number of latent points (images or frames)
        timestamps: Optional strictly increasing times, one per latent point
    """

    y: torch.Tensor
    xs_factors: Tuple[torch.Tensor, ...]
    n_xi: int
    timestamps: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.y = as_float64(self.y)
        if self.y.dim() == 1:
            self.y = self.y[:, None]
        self.xs_factors = tuple(
            x if isinstance(x, torch.Tensor) and x.dtype == torch.float64 and x.dim() == 2
            else as_float64(x).reshape(len(x), -1)
            for x in self.xs_factors
        )
        if not self.xs_factors:
            raise ShapeError("an observation grid needs at least one spatial factor")
        expected = self.n_xi * self.n_s
        if self.y.shape[0] != expected:
            raise ShapeError(
                f"Y has {self.y.shape[0]} rows, expected n_xi x n_s = {self.n_xi} x {self.n_s} = {expected}"
            )
        if not bool(torch.isfinite(self.y).all()):
            raise InputError("training observations must be finite with no missing entries")
        if self.timestamps is not None:
            self.timestamps = as_float64(self.timestamps).reshape(-1)
            if self.timestamps.shape[0] != self.n_xi:
                raise ShapeError(f"{self.timestamps.shape[0]} timestamps for {self.n_xi} latent points")
            if self.n_xi > 1 and not bool(torch.all(self.timestamps[1:] > self.timestamps[:-1])):
                raise InputError("timestamps must be strictly increasing")

    @classmethod
    def from_images(
        cls, images: torch.Tensor, timestamps: Optional[Sequence[float]] = None
    ) -> "ObservationGrid":
        """
        Build a grid from an (n_xi, *spatial_shape, d_y) array of images or frames,
        one pixel-coordinate factor per spatial axis.
        """
        images = as_float64(images)
        if images.dim() < 3:
            raise ShapeError(f"images must be (n_xi, *spatial_shape, d_y), got {tuple(images.shape)}")
        n_xi, *spatial, d_y = images.shape
        xs = tuple(pixel_coordinates(s) for s in spatial)
        return cls(images.reshape(-1, d_y), xs, n_xi, timestamps)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        return tuple(x.shape[0] for x in self.xs_factors)

    @property
    def n_s(self) -> int:
        return math.prod(self.spatial_shape)

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    @property
    def d_s(self) -> int:
        return sum(x.shape[1] for x in self.xs_factors)

    @property
    def is_dynamical(self) -> bool:
        return self.timestamps is not None

    def wide(self) -> torch.Tensor:
        """n_xi x (n_s · d_y) view, one row per image."""
        return self.y.reshape(self.n_xi, self.n_s * self.y.shape[1])

    def with_y(self, y: torch.Tensor) -> "ObservationGrid":
        return ObservationGrid(y, self.xs_factors, self.n_xi, self.timestamps)

    def __repr__(self) -> str:
        return f"<ObservationGrid(n_xi={self.n_xi}, spatial={self.spatial_shape}, d_y={self.d_y})>"
