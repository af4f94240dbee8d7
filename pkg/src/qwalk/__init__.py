"""Infinitesimal random walks on a finite time grid, with statistical checks of their conditions."""

from .coeffs import PointMass, RunningMaxVolatility, Uniform, WalkSpec, load_spec, parse_expr, spec_hash
from .errors import QwalkError
from .scale import Classification, QuantumScale, TolerancePolicy, classify, make_scale
from .walk import Ensemble, Path, quadratic_variation, simulate_ensemble, simulate_path

__version__ = "0.1.0"

__all__ = [
    "Classification",
    "Ensemble",
    "Path",
    "PointMass",
    "QuantumScale",
    "QwalkError",
    "RunningMaxVolatility",
    "TolerancePolicy",
    "Uniform",
    "WalkSpec",
    "classify",
    "load_spec",
    "make_scale",
    "parse_expr",
    "quadratic_variation",
    "simulate_ensemble",
    "simulate_path",
    "spec_hash",
    "__version__",
]
