"""conewave: backward-lightcone geometry and representation formulas for
scalar/tensorial wave equations on (2+1) zero-shift Lorentzian spacetimes."""

from .metrics import Domain, MetricSpec, metric_jet, christoffel, riemann, lift

__all__ = [
    "Domain",
    "MetricSpec",
    "metric_jet",
    "christoffel",
    "riemann",
    "lift",
]

__version__ = "0.1.0"
