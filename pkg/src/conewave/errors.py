"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI lives in ``conewave.cli``; numerical
failures (NoConvergence family) and configuration errors are kept as
distinct branches so the harness can tell them apart.
"""

from __future__ import annotations


class ConewaveError(Exception):
    """Base class for all package errors."""


class ConfigError(ConewaveError):
    """Invalid run configuration (bad key, bad value, impossible tolerance)."""


class OutOfDomain(ConewaveError):
    """A point (possibly inflated by an FD stencil) left the declared box."""


class NonpositiveLapse(ConewaveError):
    """Encountered n <= 0 while sampling a metric family."""


class SingularMetric(ConewaveError):
    """Spatial or spacetime metric numerically non-invertible."""


class RankMismatch(ConewaveError):
    """Tensor component array has the wrong rank for the requested operation."""


class NumericalFailure(ConewaveError):
    """Base class for run-time numerical failures (CLI exit code 4)."""


class DomainExit(NumericalFailure):
    """Geodesic left the domain before the requested stop; partial path kept."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class StepFailure(NumericalFailure):
    """Adaptive step control underflowed."""


class NotReached(NumericalFailure):
    """Geodesic exited the domain before reaching the requested time slice."""


class NoConvergence(NumericalFailure):
    """Newton shooting failed; target outside the chronological past or
    beyond the injectivity estimate."""


class VertexUnresolved(NumericalFailure):
    """No grid node near the vertex converged while building the rho field."""


class VertexTooClose(NumericalFailure):
    """Requested point lies inside the vertex excision region (rho <= rho_cap)."""


class ConeBoundaryTooClose(NumericalFailure):
    """Requested point too close to the axis/cone degeneracy (r_tilde cap)."""


class InsufficientSamples(NumericalFailure):
    """Directional differencing requested without enough neighboring samples."""


class ExtrapolationUnstable(NumericalFailure):
    """Richardson tableau failed to settle."""


class CoefficientUnavailable(NumericalFailure):
    """Frame/coefficient computation failed along a transport path."""


class QuadratureUnderResolved(NumericalFailure):
    """Tail or boundary-layer estimate exceeds the quadrature error budget."""


class FanTooCoarse(NumericalFailure):
    """Direction-fan interpolant too noisy for derivative extraction."""


class CFLViolation(NumericalFailure):
    """FDTD time step violates the CFL bound."""


class MarginContamination(NumericalFailure):
    """FDTD comparison window touched by the absorbing margin."""


class InjectivityViolated(NumericalFailure):
    """Requested slab deeper than the causal radius-of-injectivity estimate."""
