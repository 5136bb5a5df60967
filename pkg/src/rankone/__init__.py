"""Exact simulation and numerical probes of rank-one flows built by cutting and stacking."""

__version__ = "0.1.0"

from . import analysis, construction, dynamics, errors, levels, spectral  # noqa: E402
from .construction import ConstructionParams, Family, build_stages  # noqa: E402

__all__ = [
    "__version__",
    "analysis",
    "construction",
    "dynamics",
    "errors",
    "levels",
    "spectral",
    "ConstructionParams",
    "Family",
    "build_stages",
]
