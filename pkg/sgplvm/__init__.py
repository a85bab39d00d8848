"""
Structured Bayesian Gaussian process latent variable model.

Training maximizes a collapsed variational bound whose Kronecker structure
keeps the cost linear in the number of observations; trained models infer
latents of partially observed images, impute missing values and predict at
new latent points, times and spatial resolutions.
"""

__version__ = "0.1.0"
