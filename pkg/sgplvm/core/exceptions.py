"""
Custom exceptions for the SGPLVM library.
"""


class SgplvmError(Exception):
    """Base exception for all library exceptions"""
    pass


# Input exceptions
class ShapeError(SgplvmError):
    """Raised when array shapes do not conform"""
    pass


class InputError(SgplvmError):
    """Raised when an argument violates a documented precondition"""
    pass


# Configuration exceptions
class ConfigError(SgplvmError):
    """Raised when a configuration value is invalid"""
    pass


# Data exceptions
class DataFormatError(SgplvmError):
    """Raised when a data or checkpoint file cannot be parsed"""
    pass


# Model exceptions
class ModelStateError(SgplvmError):
    """Raised when a model is used in a state that does not support the call"""
    pass


# Numeric exceptions
class NumericError(SgplvmError):
    """Base class for numerical failures"""
    pass


class DecompositionError(NumericError):
    """Raised when a Cholesky factorization fails after jitter escalation"""
    pass


class SingularMatrixError(NumericError):
    """Raised when a triangular factor has a zero on its diagonal"""
    pass


class NonFiniteBoundError(NumericError):
    """Raised when the variational bound or one of its terms is not finite"""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


class ConditioningError(NumericError):
    """Raised when a Gaussian cannot be conditioned on observed values"""
    pass


class InferenceError(NumericError):
    """Raised when test-time latent inference fails on every restart"""
    pass
