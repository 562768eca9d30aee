"""Sparse model recovery: a SINDy baseline, a GRU neural-flow recoverer, and cost models."""

from .dynamics import SYSTEM_NAMES, Trajectory, catalog_system, integrate, simulate
from .library import CoefficientMatrix, PolynomialLibrary, build_library, evaluate
from .sindy import StlsqConfig, stlsq_recover
from .train import RecoveryResult, TrainConfig, recover

__version__ = "0.1.0"

__all__ = [
    "SYSTEM_NAMES",
    "CoefficientMatrix",
    "PolynomialLibrary",
    "RecoveryResult",
    "StlsqConfig",
    "TrainConfig",
    "Trajectory",
    "build_library",
    "catalog_system",
    "evaluate",
    "integrate",
    "recover",
    "simulate",
    "stlsq_recover",
]
