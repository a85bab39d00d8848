from sgplvm.repositories.matrix_file_repository import matrix_files, MatrixFileRepository
from sgplvm.repositories.checkpoint_repository import checkpoints, CheckpointRepository
from sgplvm.repositories.grid_repository import grids, GridRepository

__all__ = [
    "matrix_files",
    "checkpoints",
    "grids",
    "MatrixFileRepository",
    "CheckpointRepository",
    "GridRepository",
]
