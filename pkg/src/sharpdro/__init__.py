"""Sharpness-aware distributionally robust training on severity-graded corruptions.

Modules: ``autodiff`` (tape autodiff and the MLP), ``datagen`` (Poisson
severities and corruptions), ``methods`` (the training methods),
``metrics`` (per-severity evaluation), ``minimax`` (the SGDA+SAM testbed
and its audits), ``harness`` / ``cli`` (orchestration).
"""
__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DimensionError,
    DivergenceError,
    DomainError,
    IngestionError,
    NumericError,
    PreconditionError,
    SharpDROError,
)

__all__ = [
    "__version__",
    "SharpDROError",
    "DimensionError",
    "NumericError",
    "PreconditionError",
    "DomainError",
    "IngestionError",
    "ConfigError",
    "DivergenceError",
]
