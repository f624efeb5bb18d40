"""Spacetime metric families on (2+1) domains.

All metrics have the zero-shift block form

    g = -n(t,x)^2 dt^2 + g_ij(t,x) dx^i dx^j,

with x^0 = t and Greek indices running over {0, 1, 2}.  Three parametric
families are provided (flat, perturbed lapse, conformally flat spatial
metric), each with closed-form first and second derivatives.  Finite
difference jets are available as an independent cross-check via
``deriv_mode="finite_difference"``.

Every evaluator is vectorized: points are arrays of shape (..., 3) and the
returned component arrays broadcast accordingly.  The index convention for
the mixed Riemann tensor follows the coordinate formula

    riem[b, a, c, d] = d_d Gamma^a_bc - d_c Gamma^a_bd
                       + Gamma^a_de Gamma^e_bc - Gamma^a_ce Gamma^e_bd,

antisymmetric in its last pair.  The timelike-congruence contraction used
by the Raychaudhuri check is then ricci_uu = riem[b, a, c, a] u^b u^c.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NonpositiveLapse, OutOfDomain, RankMismatch, SingularMetric

FAMILIES = ("minkowski", "perturbed_lapse", "conformally_flat")

# Gaussian shape offsets: deliberately off the default vertex axis so that
# circle-direction quantities (zetabar, circle gradients) do not vanish by
# rotational symmetry.
_GAUSS_CENTER = (0.35, -0.2)
_BUMP_WIDTH2 = 0.25  # w = 0.5, focusing bump used by the injectivity tests


# ---------------------------------------------------------------------------
# scalar shape functions s(t, x, y) -> (s, ds[3], d2s[3,3])
# ---------------------------------------------------------------------------

def _shape_linear_x(t, x, y):
    z = np.zeros_like(x)
    s = x
    ds = np.stack([z, np.ones_like(x), z], axis=-1)
    d2s = np.zeros(np.shape(x) + (3, 3))
    return s, ds, d2s


def _gauss_shape(t, x, y, cx, cy, w2=1.0):
    u = x - cx
    v = y - cy
    s = np.exp(-(u * u + v * v) / w2)
    z = np.zeros_like(s)
    ds = np.stack([z, -2.0 * u * s / w2, -2.0 * v * s / w2], axis=-1)
    d2s = np.zeros(np.shape(s) + (3, 3))
    d2s[..., 1, 1] = (4.0 * u * u / w2 - 2.0) * s / w2
    d2s[..., 2, 2] = (4.0 * v * v / w2 - 2.0) * s / w2
    d2s[..., 1, 2] = d2s[..., 2, 1] = 4.0 * u * v * s / (w2 * w2)
    return s, ds, d2s


def _shape_gauss(t, x, y):
    return _gauss_shape(t, x, y, *_GAUSS_CENTER)


def _shape_center_gauss(t, x, y):
    return _gauss_shape(t, x, y, 0.0, 0.0)


def _shape_bump(t, x, y):
    return _gauss_shape(t, x, y, 0.0, 0.0, w2=_BUMP_WIDTH2)


def _shape_sine_x(t, x, y):
    s = np.sin(x)
    z = np.zeros_like(s)
    ds = np.stack([z, np.cos(x), z], axis=-1)
    d2s = np.zeros(np.shape(s) + (3, 3))
    d2s[..., 1, 1] = -np.sin(x)
    return s, ds, d2s


def _shape_tsine(t, x, y):
    # time-dependent shape: exercises nonzero slice second fundamental form
    w = 0.7
    ct = np.cos(w * t)
    st = np.sin(w * t)
    sx = np.sin(x)
    cx = np.cos(x)
    s = sx * ct
    z = np.zeros_like(s)
    ds = np.stack([-w * sx * st, cx * ct, z], axis=-1)
    d2s = np.zeros(np.shape(s) + (3, 3))
    d2s[..., 0, 0] = -w * w * sx * ct
    d2s[..., 0, 1] = d2s[..., 1, 0] = -w * cx * st
    d2s[..., 1, 1] = -sx * ct
    return s, ds, d2s


SHAPES = {
    "linear_x": _shape_linear_x,
    "gauss": _shape_gauss,
    "center_gauss": _shape_center_gauss,
    "bump": _shape_bump,
    "sine_x": _shape_sine_x,
    "tsine": _shape_tsine,
}


# ---------------------------------------------------------------------------
# specification types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    """Box [t_min, t_max] x [x_min, x_max]^2."""

    t_min: float
    t_max: float
    x_min: float
    x_max: float

    def contains(self, pts, margin: float = 0.0) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        t, x, y = pts[..., 0], pts[..., 1], pts[..., 2]
        ok = (t >= self.t_min + margin) & (t <= self.t_max - margin)
        for c in (x, y):
            ok &= (c >= self.x_min + margin) & (c <= self.x_max - margin)
        return ok

    def as_tuple(self):
        return (self.t_min, self.t_max, self.x_min, self.x_max)


@dataclass(frozen=True)
class MetricSpec:
    """Immutable description of one metric family instance.

    ``deriv_mode="analytic"`` uses the closed-form first and second
    derivatives of the family; ``"finite_difference"`` rebuilds dg and d2g
    from central differences of g with step ``fd_step`` (the independent
    cross-check path, accurate to O(h^2)).
    """

    family: str = "minkowski"
    eps: float = 0.0
    shape: str = "gauss"
    domain: Domain = field(default_factory=lambda: Domain(-1.0, 1.25, -2.5, 2.5))
    deriv_mode: str = "analytic"
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown metric family {self.family!r}")
        if self.family != "minkowski" and self.shape not in SHAPES:
            raise ValueError(f"unknown shape id {self.shape!r}")
        if self.deriv_mode not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown deriv_mode {self.deriv_mode!r}")
        if self.deriv_mode == "finite_difference" and not self.fd_step > 0:
            raise ValueError("fd_step must be > 0")

    @property
    def is_flat(self) -> bool:
        return self.family == "minkowski" or self.eps == 0.0

    def metric_hash(self) -> str:
        payload = {
            "family": self.family,
            "eps": self.eps,
            "shape": self.shape if self.family != "minkowski" else None,
            "domain": self.domain.as_tuple(),
            "deriv_mode": self.deriv_mode,
            "fd_step": self.fd_step if self.deriv_mode == "finite_difference" else None,
        }
        return hashlib.md5(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def stencil_margin(self) -> float:
        if self.deriv_mode == "finite_difference":
            return 2.0 * self.fd_step
        return 0.0


@dataclass(frozen=True)
class MetricJet:
    """Metric components and derivatives at one point.

    g has signature (-,+,+) with the zero-shift block structure; dg stores
    d_c g_ab as dg[c, a, b]; d2g (order 2 only) stores d_c d_d g_ab as
    d2g[c, d, a, b].
    """

    point: np.ndarray
    g: np.ndarray
    dg: np.ndarray
    d2g: np.ndarray | None = None

    @property
    def lapse(self) -> float:
        return float(np.sqrt(-self.g[0, 0]))


@dataclass(frozen=True)
class Connection:
    """Christoffel symbols gamma[a, b, c] = Gamma^a_bc, symmetric in (b, c)."""

    point: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True)
class Curvature:
    """Mixed Riemann components riem[b, a, c, d] at a point."""

    point: np.ndarray
    riem: np.ndarray

    def ricci_uu(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        return float(np.einsum("baca,b,c->", self.riem, u, u))

    def mixed_TN(self, T: np.ndarray, N: np.ndarray) -> np.ndarray:
        """Matrix M[b, a] = riem[b, a, c, d] T^c N^d."""
        return np.einsum("bacd,c,d->ba", self.riem, T, N)


@dataclass(frozen=True)
class LiftedMetricJet:
    """Product extension g + dz^2 on the 4-dimensional lifted manifold."""

    base: MetricJet

    @property
    def g(self) -> np.ndarray:
        g4 = np.zeros((4, 4))
        g4[:3, :3] = self.base.g
        g4[3, 3] = 1.0
        return g4

    @property
    def dg(self) -> np.ndarray:
        d = np.zeros((4, 4, 4))
        d[:3, :3, :3] = self.base.dg
        return d


# ---------------------------------------------------------------------------
# vectorized family evaluators
# ---------------------------------------------------------------------------

def _lapse_jet(spec: MetricSpec, t, x, y):
    """n, dn[...,3], d2n[...,3,3] for the family's lapse."""
    if spec.family == "perturbed_lapse":
        s, ds, d2s = SHAPES[spec.shape](t, x, y)
        return 1.0 + spec.eps * s, spec.eps * ds, spec.eps * d2s
    shp = np.shape(np.asarray(t))
    return np.ones(shp), np.zeros(shp + (3,)), np.zeros(shp + (3, 3))


def _conformal_jet(spec: MetricSpec, t, x, y):
    """lam, dlam, d2lam with g_ij = exp(2 lam) delta_ij."""
    if spec.family == "conformally_flat":
        s, ds, d2s = SHAPES[spec.shape](t, x, y)
        return spec.eps * s, spec.eps * ds, spec.eps * d2s
    shp = np.shape(np.asarray(t))
    return np.zeros(shp), np.zeros(shp + (3,)), np.zeros(shp + (3, 3))


def _metric_arrays_analytic(spec: MetricSpec, pts: np.ndarray, order: int):
    pts = np.asarray(pts, dtype=float)
    t, x, y = pts[..., 0], pts[..., 1], pts[..., 2]
    shp = t.shape
    n, dn, d2n = _lapse_jet(spec, t, x, y)
    if np.any(n <= 0.0):
        raise NonpositiveLapse("lapse n <= 0 inside sampled region")
    lam, dlam, d2lam = _conformal_jet(spec, t, x, y)
    e2l = np.exp(2.0 * lam)

    g = np.zeros(shp + (3, 3))
    g[..., 0, 0] = -n * n
    g[..., 1, 1] = e2l
    g[..., 2, 2] = e2l

    dg = np.zeros(shp + (3, 3, 3))
    dg[..., :, 0, 0] = -2.0 * n[..., None] * dn
    de2l = 2.0 * e2l[..., None] * dlam
    dg[..., :, 1, 1] = de2l
    dg[..., :, 2, 2] = de2l

    d2g = None
    if order >= 2:
        d2g = np.zeros(shp + (3, 3, 3, 3))
        d2g[..., :, :, 0, 0] = -2.0 * (
            dn[..., :, None] * dn[..., None, :] + n[..., None, None] * d2n
        )
        d2e2l = e2l[..., None, None] * (
            2.0 * d2lam + 4.0 * dlam[..., :, None] * dlam[..., None, :]
        )
        d2g[..., :, :, 1, 1] = d2e2l
        d2g[..., :, :, 2, 2] = d2e2l
    return g, dg, d2g


def _g_only(spec: MetricSpec, pts: np.ndarray) -> np.ndarray:
    return _metric_arrays_analytic(spec, pts, order=1)[0]


def metric_arrays(spec: MetricSpec, pts: np.ndarray, order: int = 1):
    """g, dg (and d2g for order 2) at an array of points, honoring deriv_mode."""
    if spec.deriv_mode == "analytic":
        return _metric_arrays_analytic(spec, pts, order)
    h = spec.fd_step
    pts = np.asarray(pts, dtype=float)
    g = _g_only(spec, pts)
    dg = np.empty(pts.shape[:-1] + (3, 3, 3))
    for c in range(3):
        e = np.zeros(3)
        e[c] = h
        dg[..., c, :, :] = (_g_only(spec, pts + e) - _g_only(spec, pts - e)) / (2.0 * h)
    d2g = None
    if order >= 2:
        d2g = np.empty(pts.shape[:-1] + (3, 3, 3, 3))
        for c in range(3):
            ec = np.zeros(3)
            ec[c] = h
            d2g[..., c, c, :, :] = (
                _g_only(spec, pts + ec) - 2.0 * g + _g_only(spec, pts - ec)
            ) / (h * h)
            for d in range(c + 1, 3):
                ed = np.zeros(3)
                ed[d] = h
                mixed = (
                    _g_only(spec, pts + ec + ed)
                    - _g_only(spec, pts + ec - ed)
                    - _g_only(spec, pts - ec + ed)
                    + _g_only(spec, pts - ec - ed)
                ) / (4.0 * h * h)
                d2g[..., c, d, :, :] = mixed
                d2g[..., d, c, :, :] = mixed
    return g, dg, d2g


def inverse_metric(g: np.ndarray) -> np.ndarray:
    return np.linalg.inv(g)


def _christoffel_sym(dg: np.ndarray) -> np.ndarray:
    """sym[..., e, b, c] = d_b g_ec + d_c g_be - d_e g_bc."""
    return np.moveaxis(dg, -3, -2) + np.swapaxes(dg, -3, -1) - dg


def gamma_from_arrays(g: np.ndarray, dg: np.ndarray) -> np.ndarray:
    """Gamma^a_bc = 1/2 g^{ae} (d_b g_ec + d_c g_be - d_e g_bc)."""
    ginv = inverse_metric(g)
    sym = _christoffel_sym(dg)
    shp = sym.shape
    out = 0.5 * np.matmul(ginv, sym.reshape(shp[:-2] + (9,)))
    return out.reshape(shp)


def gamma_arrays(spec: MetricSpec, pts: np.ndarray) -> np.ndarray:
    g, dg, _ = metric_arrays(spec, pts, order=1)
    return gamma_from_arrays(g, dg)


def gamma_deriv_arrays(spec: MetricSpec, pts: np.ndarray) -> np.ndarray:
    """dgam[..., d, a, b, c] = d_d Gamma^a_bc.

    Analytic mode differentiates the Christoffel formula in closed form
    (using d2g); finite_difference mode recomputes Gamma at stencil points.
    """
    if spec.deriv_mode == "finite_difference":
        h = spec.fd_step
        pts = np.asarray(pts, dtype=float)
        out = np.empty(pts.shape[:-1] + (3, 3, 3, 3))
        for d in range(3):
            e = np.zeros(3)
            e[d] = h
            out[..., d, :, :, :] = (
                gamma_arrays(spec, pts + e) - gamma_arrays(spec, pts - e)
            ) / (2.0 * h)
        return out
    g, dg, d2g = metric_arrays(spec, pts, order=2)
    return gamma_deriv_from_arrays(g, dg, d2g)


def gamma_deriv_from_arrays(g: np.ndarray, dg: np.ndarray, d2g: np.ndarray) -> np.ndarray:
    """Closed-form d_d Gamma^a_bc from metric derivatives."""
    ginv = inverse_metric(g)
    sym = _christoffel_sym(dg)                      # [..., e, b, c]
    # dsym[..., d, e, b, c]: derivative slot d in front of the sym slots
    dsym = np.moveaxis(d2g, -3, -2) + np.swapaxes(d2g, -3, -1) - d2g
    # d(g^{-1}) = -g^{-1} dg g^{-1}, batched over the derivative slot
    gi = ginv[..., None, :, :]
    dginv = -np.matmul(np.matmul(gi, dg), gi)       # [..., d, a, e]
    shp = sym.shape
    symf = sym.reshape(shp[:-3] + (1, 3, 9))
    dsymf = dsym.reshape(shp[:-3] + (3, 3, 9))
    out = 0.5 * (np.matmul(dginv, symf) + np.matmul(gi, dsymf))
    return out.reshape(shp[:-3] + (3, 3, 3, 3))


def riemann_arrays(spec: MetricSpec, pts: np.ndarray) -> np.ndarray:
    """Mixed Riemann components riem[..., b, a, c, d]."""
    gam = gamma_arrays(spec, pts)
    dgam = gamma_deriv_arrays(spec, pts)
    r = (
        np.einsum("...dabc->...bacd", dgam)
        - np.einsum("...cabd->...bacd", dgam)
        + np.einsum("...ade,...ebc->...bacd", gam, gam)
        - np.einsum("...ace,...ebd->...bacd", gam, gam)
    )
    return r


def ricci_uu_arrays(riem: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Transverse tidal trace riem[b,a,c,a] u^b u^c (Raychaudhuri source)."""
    return np.einsum("...baca,...b,...c->...", riem, u, u)


# ---------------------------------------------------------------------------
# pointwise operations
# ---------------------------------------------------------------------------

def metric_jet(spec: MetricSpec, q, order: int = 1) -> MetricJet:
    """Sample the metric family at a single spacetime point.

    Raises OutOfDomain when q (inflated by the FD stencil width in
    finite_difference mode) leaves the declared box, and NonpositiveLapse
    if the lapse fails its positivity invariant.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (3,):
        raise ValueError("point must have shape (3,)")
    if not bool(spec.domain.contains(q, margin=spec.stencil_margin())):
        raise OutOfDomain(f"point {q.tolist()} outside domain {spec.domain.as_tuple()}")
    g, dg, d2g = metric_arrays(spec, q[None, :], order=order)
    jet = MetricJet(point=q, g=g[0], dg=dg[0], d2g=None if d2g is None else d2g[0])
    minors = (jet.g[1, 1], jet.g[1, 1] * jet.g[2, 2] - jet.g[1, 2] ** 2)
    if minors[0] <= 0 or minors[1] <= 0:
        raise SingularMetric("spatial metric not positive definite")
    return jet


def christoffel(jet: MetricJet, cond_cap: float = 1e12) -> Connection:
    if np.linalg.cond(jet.g) > cond_cap:
        raise SingularMetric("metric numerically non-invertible")
    gam = gamma_from_arrays(jet.g[None], jet.dg[None])[0]
    return Connection(point=jet.point, gamma=gam)


def riemann(spec: MetricSpec, q) -> Curvature:
    q = np.asarray(q, dtype=float)
    margin = spec.stencil_margin() * 2 if spec.deriv_mode == "finite_difference" else 0.0
    if not bool(spec.domain.contains(q, margin=margin)):
        raise OutOfDomain(f"point {q.tolist()} too close to domain boundary")
    return Curvature(point=q, riem=riemann_arrays(spec, q[None])[0])


def lift(jet: MetricJet) -> LiftedMetricJet:
    """Extend the jet by a flat z-direction; all invariants hold exactly."""
    return LiftedMetricJet(base=jet)


def lifted_gamma(jet: MetricJet) -> np.ndarray:
    """4x4x4 Christoffels of the product metric: z-slots vanish exactly."""
    gam4 = np.zeros((4, 4, 4))
    gam4[:3, :3, :3] = christoffel(jet).gamma
    return gam4


def lifted_riemann_arrays(spec: MetricSpec, pts: np.ndarray) -> np.ndarray:
    """Mixed Riemann of the lifted metric, riem4[..., b, a, c, d] (indices 0..3).

    Evaluated through the 4-dimensional coordinate formula on the padded
    Christoffels; the z-slots come out identically zero and the spacetime
    block reproduces the base curvature.
    """
    pts = np.asarray(pts, dtype=float)
    gam = gamma_arrays(spec, pts)
    dgam = gamma_deriv_arrays(spec, pts)
    shp = pts.shape[:-1]
    gam4 = np.zeros(shp + (4, 4, 4))
    gam4[..., :3, :3, :3] = gam
    dgam4 = np.zeros(shp + (4, 4, 4, 4))
    dgam4[..., :3, :3, :3, :3] = dgam
    return (
        np.einsum("...dabc->...bacd", dgam4)
        - np.einsum("...cabd->...bacd", dgam4)
        + np.einsum("...ade,...ebc->...bacd", gam4, gam4)
        - np.einsum("...ace,...ebd->...bacd", gam4, gam4)
    )


def curvature_star_phi(curv: Curvature, T: np.ndarray, N: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Curvature contraction acting on a rank-l component array.

    For phi with l slots (each of dimension 3) returns
    sum_i M[mu_i, a] phi[..., a at slot i, ...] with M[b, a] = riem[b,a,c,d] T^c N^d.
    Rank 0 returns 0.  Linear in phi.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 0:
        return np.zeros(())
    if any(dim != 3 for dim in phi.shape):
        raise RankMismatch(f"component array with shape {phi.shape} is not a rank-l spacetime tensor")
    M = curv.mixed_TN(np.asarray(T, float), np.asarray(N, float))
    out = np.zeros_like(phi)
    for slot in range(phi.ndim):
        out += np.moveaxis(np.tensordot(M, np.moveaxis(phi, slot, 0), axes=([1], [0])), 0, slot)
    return out
