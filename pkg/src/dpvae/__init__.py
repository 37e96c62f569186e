"""Benchmark toolkit for differentially private variational autoencoders.

Trains VAEs under central (DP-Adam) and local (pixelization, Laplace,
VAE-LDP) differential privacy, attacks them with the reconstruction
membership-inference attack, and scores the privacy/accuracy trade-off.
"""

from .errors import (
    ConfigurationError,
    DegenerateDataError,
    DpvaeError,
    IntegrityError,
    NumericError,
    ParameterError,
    StateError,
    UndefinedMetricError,
)

__version__ = "0.1.0"
