"""Geodesic flow: vertex ray fans, the exponential map and its inverse.

The workhorse is a stacked ODE system for fans of past-directed timelike
geodesics from a vertex p, parameterized by tau = t_p - t (so a whole fan
shares one independent variable and fixed-tau checkpoints are slice data).
Each ray carries

  * position x and unit past-directed velocity u (u = B, the generator of
    the timelike congruence; g(u, u) = -1, arc length rho),
  * two Jacobi/variational fields (J, W=dJ/dtau-free derivative) seeded by
    direction variations at the vertex, giving the exponential-map Jacobian,
    the congruence second fundamental form and the fan measure,
  * the Lorentzian distance rho (d rho/d tau = 1/(-u^0)),
  * optionally the transport kernel amplitude for unit vertex datum,
    activated at tau_init with a Richardson companion at tau_init/2.

Direction bookkeeping: a HyperboloidDir stores the future-normalized
components (V^0, V^1, V^2) with respect to a g(p)-orthonormal frame
(T, E1, E2); the integrator applies the time reversal, so the actual
initial velocity is -V^0 T + V^1 E1 + V^2 E2 (past-directed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    DomainExit,
    NoConvergence,
    NotReached,
    StepFailure,
)
from .metrics import (
    MetricSpec,
    gamma_deriv_arrays,
    gamma_deriv_from_arrays,
    gamma_from_arrays,
    metric_arrays,
)

# state layout per ray
IX = slice(0, 3)
IU = slice(3, 6)
IJ1 = slice(6, 9)
IW1 = slice(9, 12)
IJ2 = slice(12, 15)
IW2 = slice(15, 18)
IRHO = 18
IAH = 19  # transport amplitude, Richardson leg started at tau_init/2
IAF = 20  # transport amplitude started at tau_init
NCOMP = 21

DEFAULT_RTOL = 3e-11
DEFAULT_ATOL = 1e-13
_TAU_START_FRAC = 1e-5


@dataclass(frozen=True)
class HyperboloidDir:
    """Unit future timelike direction in the tangent space at the vertex."""

    V: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.V, dtype=float)
        object.__setattr__(self, "V", V)
        q = V[0] ** 2 - V[1] ** 2 - V[2] ** 2
        if abs(q - 1.0) > 1e-12 or V[0] <= 0.0:
            raise ValueError(f"not a future unit hyperboloid direction: {V.tolist()}")

    @classmethod
    def from_chart(cls, v1: float, v2: float) -> "HyperboloidDir":
        return cls(np.array([np.sqrt(1.0 + v1 * v1 + v2 * v2), v1, v2]))

    @classmethod
    def from_angles(cls, chi: float, theta: float) -> "HyperboloidDir":
        return cls(
            np.array(
                [np.cosh(chi), np.sinh(chi) * np.cos(theta), np.sinh(chi) * np.sin(theta)]
            )
        )


def fan_directions(chi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Hyperboloid points V(chi, theta), shape broadcast(chi, theta) + (3,)."""
    chi, theta = np.broadcast_arrays(chi, theta)
    return np.stack(
        [np.cosh(chi), np.sinh(chi) * np.cos(theta), np.sinh(chi) * np.sin(theta)],
        axis=-1,
    )


def fan_seeds(chi: np.ndarray, theta: np.ndarray):
    """Coordinate seeds (dV/dchi, dV/dtheta) of the (chi, theta) fan chart."""
    chi, theta = np.broadcast_arrays(chi, theta)
    zero = np.zeros_like(chi)
    s_chi = np.stack(
        [np.sinh(chi), np.cosh(chi) * np.cos(theta), np.cosh(chi) * np.sin(theta)],
        axis=-1,
    )
    s_theta = np.stack(
        [zero, -np.sinh(chi) * np.sin(theta), np.sinh(chi) * np.cos(theta)], axis=-1
    )
    return s_chi, s_theta


def chart_seeds(V: np.ndarray):
    """Seeds dV/dV^1, dV/dV^2 of the (V^1, V^2) chart at each direction."""
    V = np.asarray(V, dtype=float)
    one = np.ones(V.shape[:-1])
    zero = np.zeros(V.shape[:-1])
    s1 = np.stack([V[..., 1] / V[..., 0], one, zero], axis=-1)
    s2 = np.stack([V[..., 2] / V[..., 0], zero, one], axis=-1)
    return s1, s2


def rapidity_to_dir(w: np.ndarray) -> np.ndarray:
    """Exponential chart of the hyperboloid: w in R^2 -> V with chi = |w|."""
    w = np.asarray(w, dtype=float)
    chi = np.linalg.norm(w, axis=-1)
    safe = np.where(chi > 1e-300, chi, 1.0)
    sc = np.where(chi > 1e-8, np.sinh(chi) / safe, 1.0 + chi * chi / 6.0)
    return np.concatenate([np.cosh(chi)[..., None], sc[..., None] * w], axis=-1)


def rapidity_seeds(w: np.ndarray):
    """Chart seeds dV/dw_1, dV/dw_2 of the rapidity chart."""
    w = np.asarray(w, dtype=float)
    chi = np.linalg.norm(w, axis=-1)
    small = chi <= 1e-8
    safe = np.where(small, 1.0, chi)
    nhat = np.where(small[..., None], 0.0, w / safe[..., None])
    shc = np.where(small, 1.0, np.sinh(safe) / safe)
    seeds = []
    for i in range(2):
        dchi = nhat[..., i]
        dV0 = np.sinh(chi) * dchi
        dVj = np.empty(w.shape)
        for j in range(2):
            dVj[..., j] = (
                np.cosh(chi) * dchi * nhat[..., j]
                + shc * ((1.0 if i == j else 0.0) - nhat[..., i] * nhat[..., j])
            )
        # at the chart origin dV^j/dw_i -> delta_ij
        dVj[small] = 0.0
        if np.any(small):
            dVj[small, i] = 1.0
        seeds.append(np.concatenate([dV0[..., None], dVj], axis=-1))
    return seeds[0], seeds[1]


def vertex_frame(spec: MetricSpec, p) -> tuple[float, np.ndarray]:
    """Lapse n(p) and a g(p)-orthonormal frame (T, E1, E2) as rows.

    T = n^{-1} d_t; E1, E2 span the spatial slice by Gram-Schmidt with
    positive orientation.
    """
    p = np.asarray(p, dtype=float)
    g, _, _ = metric_arrays(spec, p[None], order=1)
    g = g[0]
    n_p = float(np.sqrt(-g[0, 0]))
    T = np.array([1.0 / n_p, 0.0, 0.0])
    e1 = np.array([0.0, 1.0, 0.0])
    e1 = e1 / np.sqrt(e1 @ g @ e1)
    e2 = np.array([0.0, 0.0, 1.0])
    e2 = e2 - (e2 @ g @ e1) * e1
    e2 = e2 / np.sqrt(e2 @ g @ e2)
    return n_p, np.stack([T, e1, e2])


def reverse_to_past(frame: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Map future-normalized hyperboloid components to the past-directed
    coordinate velocity -V^0 T + V^1 E1 + V^2 E2."""
    V = np.asarray(V, dtype=float)
    signs = np.array([-1.0, 1.0, 1.0])
    return np.einsum("...i,ij->...j", V * signs, frame)


def _rhs_factory(spec: MetricSpec, nrays: int, tp: float, transport_active: bool):
    def rhs(tau, yflat):
        y = yflat.reshape(nrays, NCOMP)
        x = y[:, IX]
        u = y[:, IU]
        if spec.deriv_mode == "analytic":
            g, dg, d2g = metric_arrays(spec, x, order=2)
            gam = gamma_from_arrays(g, dg)
            dgam = gamma_deriv_from_arrays(g, dg, d2g)
        else:
            g, dg, _ = metric_arrays(spec, x, order=1)
            gam = gamma_from_arrays(g, dg)
            dgam = gamma_deriv_arrays(spec, x)
        fac = 1.0 / (-u[:, 0])
        dy = np.empty_like(y)
        uu = (u[:, :, None] * u[:, None, :]).reshape(-1, 9, 1)
        acc = -np.matmul(gam.reshape(-1, 3, 9), uu)[:, :, 0]
        dy[:, IX] = u * fac[:, None]
        dy[:, IU] = acc * fac[:, None]
        Jp = np.stack([y[:, IJ1], y[:, IJ2]], axis=1)
        Wp = np.stack([y[:, IW1], y[:, IW2]], axis=1)
        # dW^a = -dGamma^a_bc,d J^d u^b u^c - 2 Gamma^a_bc u^b W^c
        B = np.matmul(dgam.reshape(-1, 3, 3, 9), uu[:, None]).reshape(-1, 3, 3)
        term1 = -np.matmul(Jp, B)
        # C[n, a, c] = Gamma^a_bc u^b
        gamT = np.moveaxis(gam, -2, -3).reshape(-1, 3, 9)
        C = np.matmul(u[:, None, :], gamT).reshape(-1, 3, 3)
        term2 = -2.0 * np.matmul(Wp, np.swapaxes(C, 1, 2))
        dW = term1 + term2
        dy[:, IJ1] = Wp[:, 0] * fac[:, None]
        dy[:, IJ2] = Wp[:, 1] * fac[:, None]
        dy[:, IW1] = dW[:, 0] * fac[:, None]
        dy[:, IW2] = dW[:, 1] * fac[:, None]
        dy[:, IRHO] = fac
        if transport_active:
            rho = y[:, IRHO]
            DJ = Wp + np.matmul(Jp, np.swapaxes(C, 1, 2))
            gJ = np.matmul(g, np.swapaxes(Jp, 1, 2))
            K = np.matmul(DJ, gJ)
            G = np.matmul(Jp, gJ)
            K = 0.5 * (K + np.swapaxes(K, 1, 2))
            det = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] * G[:, 1, 0]
            trk = (
                G[:, 1, 1] * K[:, 0, 0]
                - G[:, 0, 1] * K[:, 1, 0]
                - G[:, 1, 0] * K[:, 0, 1]
                + G[:, 0, 0] * K[:, 1, 1]
            ) / det
            # 1/2 tr k + (n^{-1} b^{-1} - 1)/rho, using n^{-1} b^{-1} = rho (-u^0)/tau
            coef = 0.5 * trk + (-u[:, 0]) / tau - 1.0 / rho
            dy[:, IAH] = -coef * y[:, IAH] * fac
            dy[:, IAF] = -coef * y[:, IAF] * fac
        else:
            dy[:, IAH] = 0.0
            dy[:, IAF] = 0.0
        return dy.reshape(-1)

    return rhs


@dataclass
class FanData:
    """Checkpoint data of one integrated vertex fan.

    Y has shape (n_tau, n_rays, NCOMP); tau is the checkpoint grid (kept in
    increasing order).  The transport amplitudes correspond to unit vertex
    datum; the Richardson-combined amplitude is ``amplitude()``.
    """

    spec: MetricSpec
    p: np.ndarray
    n_p: float
    frame: np.ndarray
    V: np.ndarray
    tau: np.ndarray
    Y: np.ndarray
    tau_init: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def x(self):
        return self.Y[..., IX]

    @property
    def u(self):
        return self.Y[..., IU]

    @property
    def J1(self):
        return self.Y[..., IJ1]

    @property
    def W1(self):
        return self.Y[..., IW1]

    @property
    def J2(self):
        return self.Y[..., IJ2]

    @property
    def W2(self):
        return self.Y[..., IW2]

    @property
    def rho(self):
        return self.Y[..., IRHO]

    def amplitude(self) -> np.ndarray:
        """Transport amplitude for unit vertex datum, one Richardson step."""
        if self.tau_init is None:
            raise ValueError("fan integrated without transport amplitudes")
        return 2.0 * self.Y[..., IAH] - self.Y[..., IAF]

    def minus_u0(self):
        return -self.u[..., 0]

    def level(self, i: int) -> "FanLevel":
        return FanLevel(self, i)


class FanLevel:
    """View of one fixed-tau checkpoint of a fan (one slice of I^-(p))."""

    def __init__(self, fan: FanData, i: int):
        self.fan = fan
        self.i = i
        self.tau = float(fan.tau[i])
        self.x = fan.x[i]
        self.u = fan.u[i]
        self.rho = fan.rho[i]
        self.Jp = np.stack([fan.J1[i], fan.J2[i]], axis=1)
        self.Wp = np.stack([fan.W1[i], fan.W2[i]], axis=1)


def taylor_vertex_state(spec: MetricSpec, p, n_p, frame, V, seeds1, seeds2, tau_s):
    """Second-order Taylor launch of the fan state at tiny tau_s."""
    p = np.asarray(p, dtype=float)
    N = V.shape[0]
    u0 = reverse_to_past(frame, V)
    g, dg, _ = metric_arrays(spec, np.broadcast_to(p, (N, 3)), order=1)
    gam = gamma_from_arrays(g, dg)
    acc = -np.einsum("nabc,nb,nc->na", gam, u0, u0)
    m0 = -u0[:, 0]
    vhat = u0 / m0[:, None]
    dm0 = -acc[:, 0] / m0
    # d vhat/d tau = (acc + u * d(-u0)/dtau ... ) / (-u0)^2, chain through rho
    dvhat = (acc / m0[:, None] + u0 * (dm0 / m0)[:, None]) / m0[:, None]
    y = np.zeros((N, NCOMP))
    y[:, IX] = p[None, :] + vhat * tau_s + 0.5 * dvhat * tau_s**2
    y[:, IU] = u0 + acc * (tau_s / m0)[:, None]
    rho_s = tau_s / m0
    y[:, IRHO] = rho_s
    xi1 = reverse_to_past(frame, seeds1)
    xi2 = reverse_to_past(frame, seeds2)
    y[:, IJ1] = xi1 * rho_s[:, None]
    y[:, IW1] = xi1
    y[:, IJ2] = xi2 * rho_s[:, None]
    y[:, IW2] = xi2
    return y


def integrate_fan(
    spec: MetricSpec,
    p,
    V: np.ndarray,
    seeds1: np.ndarray,
    seeds2: np.ndarray,
    tau_grid: np.ndarray,
    transport_tau_init: float | None = None,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    tau_start_frac: float = _TAU_START_FRAC,
) -> FanData:
    """Integrate a fan of vertex rays with Jacobi fields to the tau grid.

    When ``transport_tau_init`` is given, the two transport amplitudes are
    switched on at tau_init/2 and tau_init with the asymptotic initial value
    1/(n_p * b(tau) * tau) (unit vertex datum); checkpoints must then lie at
    or above tau_init.
    """
    p = np.asarray(p, dtype=float)
    V = np.atleast_2d(np.asarray(V, dtype=float))
    seeds1 = np.atleast_2d(np.asarray(seeds1, dtype=float))
    seeds2 = np.atleast_2d(np.asarray(seeds2, dtype=float))
    tau_grid = np.atleast_1d(np.asarray(tau_grid, dtype=float))
    if np.any(np.diff(tau_grid) <= 0):
        raise ValueError("tau_grid must be strictly increasing")
    N = V.shape[0]
    tp = p[0]
    n_p, frame = vertex_frame(spec, p)
    tau_end = float(tau_grid[-1])
    tau_s = tau_start_frac * tau_end
    y = taylor_vertex_state(spec, p, n_p, frame, V, seeds1, seeds2, tau_s)

    if tau_grid[0] <= tau_s:
        raise ValueError("first checkpoint below the vertex launch offset")
    if transport_tau_init is None:
        breakpoints = []
    else:
        if tau_grid[0] <= transport_tau_init:
            raise ValueError("checkpoints at or below tau_init are not available with transport")
        breakpoints = [0.5 * transport_tau_init, transport_tau_init]

    segments = []
    lo = tau_s
    for b in breakpoints:
        segments.append((lo, b, False))
        lo = b
    segments.append((lo, tau_end, transport_tau_init is not None))

    out = np.empty((tau_grid.size, N, NCOMP))
    filled = 0
    for si, (a, b, active) in enumerate(segments):
        mask = (tau_grid > a) & (tau_grid <= b + 1e-15 * tau_end)
        t_eval = tau_grid[mask]
        want_final = t_eval.size == 0 or t_eval[-1] < b * (1.0 - 1e-15)
        te = np.concatenate([t_eval, [b]]) if want_final else t_eval
        rhs = _rhs_factory(spec, N, tp, active)
        sol = solve_ivp(
            rhs,
            (a, b),
            y.reshape(-1),
            method="DOP853",
            t_eval=te,
            rtol=rtol,
            atol=atol,
            first_step=min(5.0 * tau_s, 0.5 * (b - a)) if si == 0 else None,
            dense_output=False,
        )
        if not sol.success:
            raise StepFailure(f"fan integration failed on [{a}, {b}]: {sol.message}")
        ys = sol.y.T.reshape(-1, N, NCOMP)
        k = t_eval.size
        out[filled : filled + k] = ys[:k]
        filled += k
        y = ys[-1].copy()
        # transport amplitude initialization at the segment end (tau_init legs)
        if transport_tau_init is not None and si < len(segments) - 1:
            tau_here = b
            b_inv = y[:, IRHO] * n_at(spec, y[:, IX]) * (-y[:, IU.start]) / tau_here
            a_init = b_inv / (n_p * tau_here)  # 1/(n_p * b * tau)
            if si == 0:
                y[:, IAH] = a_init
            else:
                y[:, IAF] = a_init
    return FanData(
        spec=spec,
        p=p,
        n_p=n_p,
        frame=frame,
        V=V,
        tau=tau_grid,
        Y=out,
        tau_init=transport_tau_init,
        meta={"rtol": rtol, "atol": atol},
    )


def n_at(spec: MetricSpec, pts: np.ndarray) -> np.ndarray:
    g, _, _ = metric_arrays(spec, pts, order=1)
    return np.sqrt(-g[..., 0, 0])


# ---------------------------------------------------------------------------
# general-purpose single geodesics (affine parameterization)
# ---------------------------------------------------------------------------

@dataclass
class GeodesicPath:
    """Sampled geodesic with its (constant) affine norm g(x', x')."""

    kind: str
    t: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    affine_norm: float
    exited_domain: bool = False

    def norm_drift(self, spec: MetricSpec) -> float:
        g, _, _ = metric_arrays(spec, self.points, order=1)
        norms = np.einsum("ka,kab,kb->k", self.velocities, g, self.velocities)
        return float(np.max(np.abs(norms - self.affine_norm)))


def integrate_geodesic(
    spec: MetricSpec,
    start,
    v0,
    t_stop: float,
    n_samples: int = 200,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    lam_max: float | None = None,
) -> GeodesicPath:
    """Integrate the geodesic ODE x'' + Gamma(x', x') = 0 from ``start``.

    Runs in an affine parameter until the path crosses Sigma_{t_stop} or
    exits the domain (partial path returned with ``exited_domain`` set).
    """
    start = np.asarray(start, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    g, _, _ = metric_arrays(spec, start[None], order=1)
    norm0 = float(v0 @ g[0] @ v0)
    kind = "null" if abs(norm0) < 1e-10 else "timelike"
    if norm0 > 1e-10:
        raise ValueError("initial velocity must be timelike or null")
    if v0[0] == 0:
        raise ValueError("initial velocity must have a time component")

    def rhs(lam, y):
        x = y[:3][None]
        u = y[3:]
        _, dg, _ = metric_arrays(spec, x, order=1)
        gacc = gamma_from_arrays(_g_of(spec, x), dg)[0]
        return np.concatenate([u, -np.einsum("abc,b,c->a", gacc, u, u)])

    def hit_t(lam, y):
        return y[0] - t_stop

    hit_t.terminal = True
    dom = spec.domain

    def exit_dom(lam, y):
        m = spec.stencil_margin()
        return min(
            y[0] - (dom.t_min + m),
            (dom.t_max - m) - y[0],
            y[1] - (dom.x_min + m),
            (dom.x_max - m) - y[1],
            y[2] - (dom.x_min + m),
            (dom.x_max - m) - y[2],
        )

    exit_dom.terminal = True
    if lam_max is None:
        lam_max = 10.0 * (abs(t_stop - start[0]) / abs(v0[0]) + 1.0)
    sol = solve_ivp(
        rhs,
        (0.0, lam_max),
        np.concatenate([start, v0]),
        method="DOP853",
        events=[hit_t, exit_dom],
        dense_output=True,
        rtol=rtol,
        atol=atol,
    )
    if sol.status == -1:
        raise StepFailure(sol.message)
    exited = len(sol.t_events[1]) > 0 and len(sol.t_events[0]) == 0
    lam_end = sol.t[-1]
    lams = np.linspace(0.0, lam_end, n_samples)
    ys = sol.sol(lams)
    return GeodesicPath(
        kind=kind,
        t=ys[0],
        points=ys[:3].T.copy(),
        velocities=ys[3:].T.copy(),
        affine_norm=norm0,
        exited_domain=exited,
    )


def _g_of(spec, pts):
    return metric_arrays(spec, pts, order=1)[0]


# ---------------------------------------------------------------------------
# exponential map and Newton shooting (inverse exponential map)
# ---------------------------------------------------------------------------

def exp_map(spec: MetricSpec, p, t: float, V: HyperboloidDir, rtol=DEFAULT_RTOL):
    """Point Upsilon_V on the slice Sigma_t together with its Lorentzian
    distance rho(t) from the vertex."""
    p = np.asarray(p, dtype=float)
    tau_q = p[0] - t
    if tau_q <= 0:
        raise ValueError("slice must lie in the past of the vertex")
    s1, s2 = chart_seeds(V.V[None])
    fan = integrate_fan(spec, p, V.V[None], s1, s2, np.array([tau_q]), rtol=rtol)
    x = fan.x[0, 0]
    if not bool(spec.domain.contains(x, margin=spec.stencil_margin())):
        raise NotReached(f"geodesic left the domain before Sigma_{t}")
    return x, float(fan.rho[0, 0])


@dataclass
class ShootResult:
    """Converged inverse-exponential-map data at a target point."""

    V: np.ndarray
    rho: float
    tau: float
    state: np.ndarray  # full per-ray state at tau_q
    fan: FanData
    iterations: int

    @property
    def direction(self) -> HyperboloidDir:
        return HyperboloidDir(self.V)

    @property
    def u(self) -> np.ndarray:
        return self.state[IU]


def flat_rapidity_guess(p, q) -> np.ndarray:
    """Minkowski-model rapidity vector for the Newton shoot (w = chi * nhat)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    tau = p[0] - q[0]
    dx = q[1:] - p[1:]
    r = float(np.sqrt(dx @ dx))
    if r == 0.0:
        return np.zeros(2)
    ratio = min(r / tau, 1.0 - 1e-6)
    chi = np.arctanh(ratio)
    return chi * dx / r


def shoot_to_target(
    spec: MetricSpec,
    p,
    q,
    V0: np.ndarray | None = None,
    tol: float = 1e-10,
    maxit: int = 30,
    rtol: float = DEFAULT_RTOL,
) -> ShootResult:
    """Newton shooting for the direction V with exp_p(t_q, V) = q.

    Returns the hyperboloid direction, the Lorentzian distance and the full
    ray state at the target.  Raises NoConvergence when q lies outside the
    chronological past (or too close to its null boundary)."""
    w0 = None
    if V0 is not None:
        V0 = np.asarray(V0, dtype=float).reshape(3)
        chi = np.arccosh(max(V0[0], 1.0))
        nr = np.linalg.norm(V0[1:])
        w0 = (chi * V0[1:] / nr)[None, :] if nr > 0 else np.zeros((1, 2))
    w, rho, state, its, ok = shoot_batch(
        spec, p, np.asarray(q, float)[None, :], w0=w0, tol=tol, maxit=maxit, rtol=rtol
    )
    if not ok[0]:
        raise NoConvergence(f"shooting failed for target {np.asarray(q).tolist()}")
    p = np.asarray(p, dtype=float)
    tau_q = float(p[0] - np.asarray(q, float)[0])
    V3 = rapidity_to_dir(w[0])
    s1, s2 = chart_seeds(V3[None])
    fan = integrate_fan(spec, p, V3[None], s1, s2, np.array([tau_q]), rtol=rtol)
    return ShootResult(V=V3, rho=float(rho[0]), tau=tau_q, state=state[0], fan=fan, iterations=int(its[0]))


def shoot_batch(
    spec: MetricSpec,
    p,
    targets: np.ndarray,
    w0: np.ndarray | None = None,
    tol: float = 1e-10,
    maxit: int = 40,
    rtol: float = DEFAULT_RTOL,
    chi_cap: float = 10.0,
    step_cap: float = 1.0,
):
    """Vectorized damped Newton shooting for a batch of same-slice targets.

    The unknown per target is the rapidity vector w (exponential chart of
    the hyperboloid), which keeps the Newton geometry uniformly conditioned
    up to the cone.  Converged rays with chi = |w| > chi_cap are flagged as
    boundary failures (the target is on or numerically outside the null
    boundary).  Returns (w (B,2), rho (B,), state (B,NCOMP), iters, ok).
    """
    p = np.asarray(p, dtype=float)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    taus = p[0] - targets[:, 0]
    if not np.allclose(taus, taus[0], rtol=0, atol=1e-12):
        raise ValueError("shoot_batch targets must share one time slice")
    tau_q = float(taus[0])
    if tau_q <= 0:
        raise NoConvergence("targets not in the past of the vertex")
    B = targets.shape[0]
    w = np.stack([flat_rapidity_guess(p, q) for q in targets]) if w0 is None else np.array(w0, float).reshape(B, 2)
    ok = np.zeros(B, dtype=bool)
    frozen = np.zeros(B, dtype=bool)
    state = np.zeros((B, NCOMP))
    rho = np.zeros(B)
    its = np.zeros(B, dtype=int)
    res_best = np.full(B, np.inf)
    w_prev = w.copy()
    delta_pending = np.zeros((B, 2))
    scale = max(1.0, float(np.max(np.abs(targets))))

    newton_rtol = max(rtol, 1e-8)
    for it in range(maxit):
        live = np.where(~frozen)[0]
        if live.size == 0:
            break
        V3 = rapidity_to_dir(w[live])
        s1, s2 = rapidity_seeds(w[live])
        try:
            fan = integrate_fan(
                spec, p, V3, s1, s2, np.array([tau_q]),
                rtol=newton_rtol, atol=1e-10, tau_start_frac=1e-4,
            )
        except StepFailure:
            break
        Y = fan.Y[0]
        finite = np.isfinite(Y).all(axis=1)
        res = targets[live, 1:] - Y[:, IX][:, 1:]
        rnorm = np.where(finite, np.linalg.norm(res, axis=1), np.inf)
        its[live] = it + 1

        done = finite & (rnorm <= max(tol, 10.0 * newton_rtol) * scale)
        for k_loc, k_glob in zip(np.where(done)[0], live[done]):
            frozen[k_glob] = True
            ok[k_glob] = np.linalg.norm(w[k_glob]) <= chi_cap
            state[k_glob] = Y[k_loc]
            rho[k_glob] = Y[k_loc, IRHO]

        active = ~done
        if not np.any(active):
            continue
        improved = rnorm <= res_best[live] * (1.0 + 1e-12)

        # Newton direction from the fixed-t spatial Jacobian (Jacobi fields)
        us = Y[:, IU]
        Jp = np.stack([Y[:, IJ1], Y[:, IJ2]], axis=1)
        ratio = Jp[:, :, 0] / us[:, None, 0]
        X = Jp[:, :, 1:] - ratio[:, :, None] * us[:, None, 1:]
        M = np.swapaxes(X, 1, 2)
        delta = np.zeros_like(res)
        good = finite & (np.abs(np.linalg.det(np.where(finite[:, None, None], M, np.eye(2)))) > 1e-280)
        delta[good] = np.linalg.solve(M[good], res[good][..., None])[..., 0]
        dn = np.linalg.norm(delta, axis=1)
        over = dn > step_cap
        delta[over] *= (step_cap / dn[over])[:, None]

        chi_now = np.linalg.norm(w[live], axis=1)
        for k_loc in np.where(active)[0]:
            k = live[k_loc]
            if chi_now[k_loc] > chi_cap + 1.0:
                frozen[k] = True  # heading out through the null boundary
                continue
            if improved[k_loc] and good[k_loc]:
                res_best[k] = rnorm[k_loc]
                w_prev[k] = w[k]
                delta_pending[k] = delta[k_loc]
                w[k] = w[k] + delta[k_loc]
            else:
                # backtrack: halve the last accepted step
                delta_pending[k] *= 0.5
                if np.linalg.norm(delta_pending[k]) < 1e-15:
                    frozen[k] = True  # stagnated: give up on this ray
                    continue
                w[k] = w_prev[k] + delta_pending[k]

    # polish converged rays at the requested integrator tolerance
    hit = np.where(ok)[0]
    if hit.size and rtol < 1e-8:
        for _ in range(4):
            V3 = rapidity_to_dir(w[hit])
            s1, s2 = rapidity_seeds(w[hit])
            fan = integrate_fan(spec, p, V3, s1, s2, np.array([tau_q]), rtol=rtol)
            Y = fan.Y[0]
            res = targets[hit, 1:] - Y[:, IX][:, 1:]
            rnorm = np.linalg.norm(res, axis=1)
            state[hit] = Y
            rho[hit] = Y[:, IRHO]
            if np.all(rnorm <= tol * scale):
                break
            us = Y[:, IU]
            Jp = np.stack([Y[:, IJ1], Y[:, IJ2]], axis=1)
            ratio = Jp[:, :, 0] / us[:, None, 0]
            X = Jp[:, :, 1:] - ratio[:, :, None] * us[:, None, 1:]
            M = np.swapaxes(X, 1, 2)
            delta = np.linalg.solve(M, res[..., None])[..., 0]
            w[hit] = w[hit] + delta
        bad = rnorm > 100.0 * tol * scale
        ok[hit[bad]] = False
    return w, rho, state, its, ok
