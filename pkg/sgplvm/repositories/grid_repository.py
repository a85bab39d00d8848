import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from sgplvm.core.config import GridLayout
from sgplvm.core.exceptions import DataFormatError, ShapeError
from sgplvm.models.case import TestCase, cases_from_images
from sgplvm.models.grid import ObservationGrid, pixel_coordinates
from sgplvm.models.matrix_file import MatrixFile
from sgplvm.repositories.base import BaseRepository, PathLike
from sgplvm.repositories.matrix_file_repository import matrix_files

logger = logging.getLogger(__name__)


def _spatial_factors(data: MatrixFile, layout: GridLayout, path: Path) -> Tuple[torch.Tensor, ...]:
    explicit = []
    while f"Xs{len(explicit)}" in data:
        explicit.append(torch.from_numpy(data[f"Xs{len(explicit)}"].copy()))
    if explicit:
        # a 1 x n row is read as a column of n one-dimensional coordinates
        explicit = [x.reshape(-1, 1) if x.shape[0] == 1 else x for x in explicit]
        shape = tuple(x.shape[0] for x in explicit)
        if layout.spatial_shape is not None and tuple(layout.spatial_shape) != shape:
            raise DataFormatError(f"{path}: coordinates give spatial shape {shape}, layout says {layout.spatial_shape}")
        return tuple(explicit)
    if layout.spatial_shape is None:
        raise DataFormatError(f"{path}: set layout.spatial_shape or store Xs0, Xs1, ... coordinates")
    return tuple(pixel_coordinates(s) for s in layout.spatial_shape)


def _images(values: np.ndarray, n_s: int, layout: GridLayout, path: Path) -> np.ndarray:
    """Reshape a long or wide data array to n_xi x n_s x d_y in ξ-major order."""
    d_y = layout.d_y
    rows, cols = values.shape
    if cols == d_y and rows % n_s == 0 and not (rows == layout.n_xi and cols == n_s * d_y):
        n_xi = rows // n_s
        if layout.ordering == "spatial_major":
            return values.reshape(n_s, n_xi, d_y).transpose(1, 0, 2).copy()
        return values.reshape(n_xi, n_s, d_y)
    if cols == n_s * d_y:
        return values.reshape(rows, n_s, d_y)
    raise DataFormatError(
        f"{path}: array of shape {values.shape} is neither (n_xi*{n_s}) x {d_y} nor n_xi x {n_s * d_y}"
    )


def _values(data: MatrixFile) -> np.ndarray:
    return data["Y"] if "Y" in data else data.first()


class GridRepository(BaseRepository[ObservationGrid]):
    """Builds observation grids and test cases from MatrixFiles"""

    def __init__(self):
        super().__init__(ObservationGrid)

    def load(self, path: PathLike, layout: Optional[GridLayout] = None) -> ObservationGrid:
        """
        Load one data file. Without a layout the file must be in the long
        format save() writes, with its coordinates stored alongside.
        """
        if layout is None:
            layout = GridLayout(d_y=_values(matrix_files.load(path)).shape[1])
        return self.load_grid([path], layout)

    def save(self, path: PathLike, obj: ObservationGrid, encoding: Optional[str] = None) -> Path:
        """Write a grid as long-format ``Y`` plus ``Xs0``, ``Xs1``, ... and ``t`` when timestamped."""
        out = MatrixFile({"Y": obj.y.numpy()})
        for i, x in enumerate(obj.xs_factors):
            out[f"Xs{i}"] = x.numpy()
        if obj.timestamps is not None:
            out["t"] = obj.timestamps.numpy()
        return matrix_files.save(path, out, encoding)

    def load_grid(self, paths: Sequence[PathLike], layout: GridLayout) -> ObservationGrid:
        """
        Load training data from one or more files, concatenated along the latent index.

        Each file holds array ``Y`` (or its first array) either long,
        (n_xi·n_s) x d_y, or wide, n_xi x (n_s·d_y). Optional arrays: ``t``
        timestamps and ``Xs0``, ``Xs1``, ... spatial coordinates; otherwise
        unit-spaced pixel centres for layout.spatial_shape are used.

        Raises:
            DataFormatError: If a file does not match the layout
        """
        images, times, factors = [], [], None
        for path in map(Path, paths):
            data = matrix_files.load(path)
            xs = _spatial_factors(data, layout, path)
            if factors is None:
                factors = xs
            elif tuple(x.shape for x in xs) != tuple(x.shape for x in factors):
                raise DataFormatError(f"{path}: spatial grid differs from the first data file")
            block = _images(_values(data), math.prod(x.shape[0] for x in xs), layout, path)
            images.append(block)
            if "t" in data:
                t = data["t"].reshape(-1)
                if t.shape[0] != block.shape[0]:
                    raise DataFormatError(f"{path}: {t.shape[0]} timestamps for {block.shape[0]} images")
                times.append(t)
        if not images:
            raise DataFormatError("no data files given")
        if times and len(times) != len(images):
            raise DataFormatError("either every data file or none carries timestamps")

        stacked = np.concatenate(images, axis=0)
        if layout.n_xi is not None and stacked.shape[0] != layout.n_xi:
            raise DataFormatError(f"data hold {stacked.shape[0]} images, layout.n_xi is {layout.n_xi}")
        timestamps = torch.from_numpy(np.concatenate(times)) if times else None
        try:
            grid = ObservationGrid(
                torch.from_numpy(stacked.reshape(-1, layout.d_y)), factors, stacked.shape[0], timestamps
            )
        except ShapeError as exc:
            raise DataFormatError(f"{paths[0]}: {exc}") from exc
        logger.info("Loaded %r", grid)
        return grid

    def load_images(
        self, path: PathLike, layout: GridLayout, spatial_shape: Tuple[int, ...]
    ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Raw n x n_s x d_y images and optional timestamps of a test file."""
        path = Path(path)
        data = matrix_files.load(path)
        images = _images(_values(data), math.prod(spatial_shape), layout, path)
        times = data["t"].reshape(-1) if "t" in data else None
        return images, times

    def load_mask(self, path: PathLike, n_cases: int, n_s: int) -> np.ndarray:
        """
        Observation mask, 1 = observed, as n_cases x n_s.

        Raises:
            DataFormatError: If the mask size does not match
        """
        path = Path(path)
        mask = _values(matrix_files.load(path))
        if mask.size != n_cases * n_s:
            raise DataFormatError(f"{path}: mask has {mask.size} entries, expected {n_cases} x {n_s}")
        return mask.reshape(n_cases, n_s)

    def load_cases(
        self,
        test_path: PathLike,
        mask_path: Optional[PathLike],
        layout: GridLayout,
        spatial_shape: Tuple[int, ...],
        y_mean: torch.Tensor,
        y_scale: torch.Tensor,
    ) -> List[TestCase]:
        """
        Standardized test cases. Without a mask file every finite value is observed.
        """
        images, times = self.load_images(test_path, layout, spatial_shape)
        n_s = images.shape[1]
        if mask_path is None:
            mask = np.all(np.isfinite(images), axis=2).astype(np.float64)
        else:
            mask = self.load_mask(mask_path, images.shape[0], n_s)
        return cases_from_images(
            torch.from_numpy(images.copy()), torch.from_numpy(mask.copy()), spatial_shape, y_mean, y_scale,
            None if times is None else torch.from_numpy(times.copy()),
        )


grids = GridRepository()
