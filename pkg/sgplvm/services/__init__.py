"""
Service layer

This module exports the service classes that hold the model workflows:
training, prediction, latent inference and imputation, metrics, synthetic
data and the comparison baselines. Services coordinate the numerics with the
model objects and the repositories.
"""

from sgplvm.services.training_service import training_service, TrainingService
from sgplvm.services.prediction_service import prediction_service, PredictionService
from sgplvm.services.inference_service import inference_service, InferenceService
from sgplvm.services.metrics_service import metrics_service, MetricsService
from sgplvm.services.synthesis_service import synthesis_service, SynthesisService
from sgplvm.services.baseline_service import baseline_service, BaselineService

__all__ = [
    # Service instances (ready to use)
    "training_service",
    "prediction_service",
    "inference_service",
    "metrics_service",
    "synthesis_service",
    "baseline_service",

    # Service classes (for type hints or custom instantiation)
    "TrainingService",
    "PredictionService",
    "InferenceService",
    "MetricsService",
    "SynthesisService",
    "BaselineService",
]
