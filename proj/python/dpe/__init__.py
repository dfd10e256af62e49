"""Deep probabilistic ensembles: the C++ core exposed to Python."""

from ._core import (
    Ensemble,
    acquire_top_k,
    bias_prior,
    batchnorm_prior,
    compare_strategies,
    conv_prior,
    dense_prior,
    gaussian_kl,
    gen_blobs,
    gen_moons,
    gen_spirals,
    omega,
    omega_gradient,
    prediction_entropy,
    relative_performance,
    variance_floor,
)

__all__ = [
    "Ensemble",
    "acquire_top_k",
    "bias_prior",
    "batchnorm_prior",
    "compare_strategies",
    "conv_prior",
    "dense_prior",
    "gaussian_kl",
    "gen_blobs",
    "gen_moons",
    "gen_spirals",
    "omega",
    "omega_gradient",
    "prediction_entropy",
    "relative_performance",
    "variance_floor",
]
