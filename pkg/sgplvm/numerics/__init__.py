"""
Numerical core: Kronecker algebra, kernels, psi statistics and variational bounds.

Modules here depend only on torch and ``sgplvm.core``.
"""
