"""
Domain types: kernels, latent posteriors, observation grids, the SGPLVM
parameter container, test cases, predictive distributions and the file
containers they are stored in.
"""
from sgplvm.models.case import TestCase
from sgplvm.models.checkpoint import Checkpoint, OptimizerMoments
from sgplvm.models.grid import ObservationGrid
from sgplvm.models.kernel import KernelSpec, TemporalKernelSpec
from sgplvm.models.latent import VariationalLatent
from sgplvm.models.matrix_file import MatrixFile
from sgplvm.models.prediction import MixturePrediction, PredictiveGaussian
from sgplvm.models.sgplvm import SgplvmModel
from sgplvm.numerics.gaussian import LatentGaussian

__all__ = [
    "KernelSpec",
    "TemporalKernelSpec",
    "VariationalLatent",
    "LatentGaussian",
    "ObservationGrid",
    "SgplvmModel",
    "TestCase",
    "PredictiveGaussian",
    "MixturePrediction",
    "MatrixFile",
    "Checkpoint",
    "OptimizerMoments",
]
