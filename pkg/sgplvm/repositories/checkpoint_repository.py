import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from sgplvm.core.exceptions import DataFormatError, InputError, ShapeError
from sgplvm.models.checkpoint import Checkpoint, OptimizerMoments
from sgplvm.models.grid import ObservationGrid
from sgplvm.models.kernel import KernelSpec, TemporalKernelSpec
from sgplvm.models.latent import VariationalLatent
from sgplvm.models.matrix_file import MatrixFile
from sgplvm.models.sgplvm import SgplvmModel
from sgplvm.numerics.kernels import KernelFamily
from sgplvm.repositories.base import BaseRepository, PathLike
from sgplvm.repositories.matrix_file_repository import matrix_files

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# Rows of Y run latent index major, spatial index minor
ORDERING_XI_MAJOR = 0
FAMILY_CODES = list(KernelFamily)


def _tensor(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(array, dtype=np.float64))


def _row(array: np.ndarray) -> torch.Tensor:
    return _tensor(array).reshape(-1)


class CheckpointRepository(BaseRepository[Checkpoint]):
    """
    Stores a model as a MatrixFile: every parameter array, the training data,
    standardization, inducing inputs, flags and Adam moments.

    The binary encoding round-trips every parameter bit for bit.
    """

    def save(self, path: PathLike, obj: Checkpoint, encoding: Optional[str] = None) -> Path:
        """Write a checkpoint atomically."""
        return matrix_files.save(path, self.to_matrix_file(obj), encoding)

    def load(self, path: PathLike) -> Checkpoint:
        """
        Read a checkpoint.

        Raises:
            DataFormatError: If the file is not a valid checkpoint
        """
        data = matrix_files.load(path)
        try:
            return self.from_matrix_file(data)
        except (ShapeError, InputError) as exc:
            raise DataFormatError(f"{path}: inconsistent checkpoint: {exc}") from exc

    def to_matrix_file(self, checkpoint: Checkpoint) -> MatrixFile:
        model = checkpoint.model
        out = MatrixFile()
        out["format_version"] = CHECKPOINT_VERSION
        out["ordering"] = ORDERING_XI_MAJOR

        grid = model.grid
        out["n_xi"] = grid.n_xi
        out["Y"] = grid.y.numpy()
        for i, x in enumerate(grid.xs_factors):
            out[f"Xs{i}"] = x.numpy()
        if grid.timestamps is not None:
            out["t"] = grid.timestamps.numpy()
        out["y_mean"] = model.y_mean.numpy()
        out["y_scale"] = model.y_scale.numpy()

        self._put_kernel(out, "latent", model.latent_kernel)
        out["spatial_count"] = len(model.spatial_kernels)
        for i, kernel in enumerate(model.spatial_kernels):
            self._put_kernel(out, f"spatial{i}", kernel)
        if model.temporal is not None:
            self._put_kernel(out, "temporal", model.temporal)

        out["z_xi"] = model.z_xi.detach().numpy()
        out["z_s_tied"] = np.array([float(t) for t in model.tied])
        for i, (z, tied) in enumerate(zip(model.z_s, model.tied)):
            if not tied:
                out[f"z_s{i}"] = z.detach().numpy()

        q = model.q_latent
        out["q_mu"] = q.mu.detach().numpy()
        if q.is_dynamical:
            out["q_log_lambda"] = q.log_lambda.detach().numpy()
            out["q_t"] = q.timestamps.numpy()
        else:
            out["q_log_var"] = q.log_var.detach().numpy()

        out["log_beta"] = model.log_beta.detach().numpy()
        out["jitter"] = model.jitter
        out["is_trained"] = float(model.is_trained)
        out["optimize_spatial_inducing"] = float(any(p.requires_grad for p in model.z_s_free))

        if checkpoint.moments is not None:
            out["optim_exp_avg"] = checkpoint.moments.exp_avg.numpy()
            out["optim_exp_avg_sq"] = checkpoint.moments.exp_avg_sq.numpy()
            out["optim_step"] = checkpoint.moments.step
        return out

    def from_matrix_file(self, data: MatrixFile) -> Checkpoint:
        version = int(data.scalar("format_version"))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        if int(data.scalar("ordering")) != ORDERING_XI_MAJOR:
            raise DataFormatError("checkpoint uses an unknown row ordering")

        n_spatial = int(data.scalar("spatial_count"))
        xs = tuple(_tensor(data[f"Xs{i}"]) for i in range(n_spatial))
        timestamps = _row(data["t"]) if "t" in data else None
        grid = ObservationGrid(_tensor(data["Y"]), xs, int(data.scalar("n_xi")), timestamps)

        latent = self._get_kernel(data, "latent", KernelSpec)
        spatial = [self._get_kernel(data, f"spatial{i}", KernelSpec) for i in range(n_spatial)]
        temporal = self._get_kernel(data, "temporal", TemporalKernelSpec) if "temporal_family" in data else None

        if "q_log_lambda" in data:
            q = VariationalLatent(
                _tensor(data["q_mu"]), log_lambda=_tensor(data["q_log_lambda"]), timestamps=_row(data["q_t"])
            )
        else:
            q = VariationalLatent(_tensor(data["q_mu"]), log_var=_tensor(data["q_log_var"]))

        tied = [bool(v) for v in data["z_s_tied"].reshape(-1)]
        if len(tied) != n_spatial:
            raise DataFormatError(f"{len(tied)} tied flags for {n_spatial} spatial factors")
        z_s: List[Optional[torch.Tensor]] = [
            None if t else _tensor(data[f"z_s{i}"]) for i, t in enumerate(tied)
        ]

        model = SgplvmModel(
            grid, latent, spatial, q, _tensor(data["z_xi"]), z_s, 1.0,
            temporal=temporal,
            jitter=data.scalar("jitter"),
            y_mean=_row(data["y_mean"]),
            y_scale=_row(data["y_scale"]),
            optimize_spatial_inducing=bool(data.scalar("optimize_spatial_inducing")),
        )
        with torch.no_grad():
            model.log_beta.copy_(_row(data["log_beta"])[0])
        model.is_trained = bool(data.scalar("is_trained"))

        moments = None
        if "optim_exp_avg" in data:
            moments = OptimizerMoments(
                exp_avg=_row(data["optim_exp_avg"]),
                exp_avg_sq=_row(data["optim_exp_avg_sq"]),
                step=int(data.scalar("optim_step")),
            )
        logger.debug("Loaded checkpoint %r", model)
        return Checkpoint(model, moments)

    @staticmethod
    def _put_kernel(out: MatrixFile, prefix: str, kernel: KernelSpec) -> None:
        out[f"{prefix}_family"] = FAMILY_CODES.index(kernel.family)
        out[f"{prefix}_input_dim"] = kernel.input_dim
        out[f"{prefix}_log_variance"] = kernel.log_variance.detach().numpy()
        out[f"{prefix}_log_lengthscales"] = kernel.log_lengthscales.detach().numpy()

    @staticmethod
    def _get_kernel(data: MatrixFile, prefix: str, cls):
        code = int(data.scalar(f"{prefix}_family"))
        if not 0 <= code < len(FAMILY_CODES):
            raise DataFormatError(f"unknown kernel family code {code} for {prefix}")
        log_ls = _row(data[f"{prefix}_log_lengthscales"])
        if cls is TemporalKernelSpec:
            kernel = cls(FAMILY_CODES[code])
        else:
            kernel = cls(FAMILY_CODES[code], 1.0, [1.0] * log_ls.numel(), int(data.scalar(f"{prefix}_input_dim")))
        with torch.no_grad():
            kernel.log_variance.copy_(_row(data[f"{prefix}_log_variance"])[0])
            kernel.log_lengthscales.copy_(log_ls)
        return kernel


checkpoints = CheckpointRepository(Checkpoint)
