"""Sampled Lorentzian-distance field rho(t, x) on the chronological past.

The field is built by per-node Newton shooting (warm-started slice to
slice), which makes the eikonal equation an independent residual test of
the construction rather than the construction itself: the stored gradient
comes from central differences of the grid values, while pointwise
evaluation (`shoot`, `rho_at`, `grad_rho_at`) goes back to the shooting
solution and is accurate to integrator tolerance.

The binary cache layout is

    magic b"CWRF" | version u32 | metric-hash (32 ascii bytes)
    | vertex 3xf8 | t0 f8 | nt,nx,ny u32 | xs0,xs1,ys0,ys1 f8
    | rho (nt*nx*ny f8) | grad (nt*nx*ny*3 f8) | w (nt*nx*ny*2 f8)

row-major, little endian; a hash mismatch invalidates the cache.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoConvergence, VertexUnresolved
from .geodesics import (
    NCOMP,
    ShootResult,
    chart_seeds,
    flat_rapidity_guess,
    integrate_fan,
    rapidity_to_dir,
    shoot_batch,
)
from .metrics import MetricSpec, metric_arrays

_MAGIC = b"CWRF"
_VERSION = 2


def _cone_slack(spec: MetricSpec) -> float:
    """Pessimistic bound on how far the true cone can exceed the flat one."""
    if spec.is_flat:
        return 1e-9
    if spec.family == "perturbed_lapse":
        return 1.1 * abs(spec.eps) + 0.02  # coordinate light speed = n <= 1 + |eps|
    return np.expm1(abs(spec.eps)) + 0.02  # conformal: speed = exp(-lambda)


@dataclass
class RhoField:
    """Grid samples of the Lorentzian distance plus exact pointwise access."""

    spec: MetricSpec
    p: np.ndarray
    t0: float
    t_levels: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    rho: np.ndarray
    grad: np.ndarray
    w: np.ndarray
    metric_hash: str
    shoot_tol: float = 1e-10
    _cache: dict = field(default_factory=dict, repr=False)

    # -- construction -------------------------------------------------------

    @classmethod
    def build(
        cls,
        spec: MetricSpec,
        p,
        t0: float,
        resolution=(24, 33, 33),
        spatial_pad: float = 1.1,
        shoot_tol: float = 1e-10,
        maxit: int = 25,
    ) -> "RhoField":
        """Shoot every grid node of a slab below the vertex.

        resolution = (nt, nx, ny); nodes outside the chronological past are
        NaN.  The vertex slice t = t_p is included analytically.
        """
        p = np.asarray(p, dtype=float)
        tp = float(p[0])
        if not t0 < tp:
            raise ValueError("t0 must precede the vertex time")
        nt, nx, ny = resolution
        tau0 = tp - t0
        half = spatial_pad * tau0
        x_lo = max(spec.domain.x_min, p[1] - half)
        x_hi = min(spec.domain.x_max, p[1] + half)
        y_lo = max(spec.domain.x_min, p[2] - half)
        y_hi = min(spec.domain.x_max, p[2] + half)
        xs = np.linspace(x_lo, x_hi, nx)
        ys = np.linspace(y_lo, y_hi, ny)
        t_levels = np.linspace(t0, tp, nt)
        rho = np.full((nt, nx, ny), np.nan)
        grad = np.full((nt, nx, ny, 3), np.nan)
        w = np.full((nt, nx, ny, 2), np.nan)

        X, Y = np.meshgrid(xs, ys, indexing="ij")
        slack = _cone_slack(spec)
        w_prev = None
        converged_total = 0
        # sweep from just below the vertex down to t0 so warm starts flow
        for it_level in range(nt - 1, -1, -1):
            t = t_levels[it_level]
            tau = tp - t
            if tau <= 0:
                # vertex slice: rho = 0 exactly at the vertex only
                continue
            r = np.hypot(X - p[1], Y - p[2])
            candidates = r <= tau * (1.0 + slack)
            idx = np.where(candidates.reshape(-1))[0]
            if idx.size == 0:
                w_prev = None
                continue
            targets = np.column_stack(
                [np.full(idx.size, t), X.reshape(-1)[idx], Y.reshape(-1)[idx]]
            )
            w0 = np.stack([flat_rapidity_guess(p, q) for q in targets])
            if w_prev is not None:
                prev = w_prev.reshape(-1, 2)[idx]
                usable = np.isfinite(prev).all(axis=1)
                w0[usable] = prev[usable]
            ws, rhos, states, _, ok = shoot_batch(
                spec, p, targets, w0=w0, tol=shoot_tol, maxit=maxit
            )
            flat_rho = rho[it_level].reshape(-1)
            flat_w = w[it_level].reshape(-1, 2)
            flat_rho[idx[ok]] = rhos[ok]
            flat_w[idx[ok]] = ws[ok]
            rho[it_level] = flat_rho.reshape(nx, ny)
            w[it_level] = flat_w.reshape(nx, ny, 2)
            w_level = np.full((nx * ny, 2), np.nan)
            w_level[idx[ok]] = ws[ok]
            w_prev = w_level
            converged_total += int(ok.sum())
        if converged_total == 0:
            raise VertexUnresolved("no grid node below the vertex converged")
        obj = cls(
            spec=spec,
            p=p,
            t0=t0,
            t_levels=t_levels,
            xs=xs,
            ys=ys,
            rho=rho,
            grad=grad,
            w=w,
            metric_hash=spec.metric_hash(),
            shoot_tol=shoot_tol,
        )
        obj._fill_gradients()
        return obj

    def _fill_gradients(self):
        """Central differences of the stored rho (the independent gradient)."""
        nt, nx, ny = self.rho.shape
        dt = self.t_levels[1] - self.t_levels[0] if nt > 1 else 1.0
        dx = self.xs[1] - self.xs[0] if nx > 1 else 1.0
        dy = self.ys[1] - self.ys[0] if ny > 1 else 1.0
        g = np.full((nt, nx, ny, 3), np.nan)
        r = self.rho
        g[1:-1, :, :, 0] = (r[2:] - r[:-2]) / (2 * dt)
        g[:, 1:-1, :, 1] = (r[:, 2:] - r[:, :-2]) / (2 * dx)
        g[:, :, 1:-1, 2] = (r[:, :, 2:] - r[:, :, :-2]) / (2 * dy)
        self.grad = g

    # -- masks and residuals ------------------------------------------------

    def interior_mask(self, rho_cap: float = 0.0) -> np.ndarray:
        """Nodes whose full central-difference stencil lies inside J^-(p)."""
        ok = np.isfinite(self.rho)
        m = ok.copy()
        m[1:-1] &= ok[2:] & ok[:-2]
        m[[0, -1]] = False
        m[:, 1:-1] &= ok[:, 2:] & ok[:, :-2]
        m[:, [0, -1]] = False
        m[:, :, 1:-1] &= ok[:, :, 2:] & ok[:, :, :-2]
        m[:, :, [0, -1]] = False
        if rho_cap > 0:
            m &= np.where(ok, self.rho, -1.0) > rho_cap
        return m

    def eikonal_residual(self, rho_cap: float | None = None) -> dict:
        """|g^{ab} d_a rho d_b rho + 1| at interior nodes, FD gradients."""
        if rho_cap is None:
            rho_cap = 3.0 * max(
                self.xs[1] - self.xs[0], self.t_levels[1] - self.t_levels[0]
            )
        mask = self.interior_mask(rho_cap)
        pts = self._grid_points()[mask]
        dr = self.grad[mask]
        g, _, _ = metric_arrays(self.spec, pts, order=1)
        ginv = np.linalg.inv(g)
        res = np.abs(np.einsum("nab,na,nb->n", ginv, dr, dr) + 1.0)
        return {
            "max": float(res.max()) if res.size else float("nan"),
            "mean": float(res.mean()) if res.size else float("nan"),
            "count": int(res.size),
            "rho_cap": float(rho_cap),
        }

    def _grid_points(self) -> np.ndarray:
        T, X, Y = np.meshgrid(self.t_levels, self.xs, self.ys, indexing="ij")
        return np.stack([T, X, Y], axis=-1)

    # -- pointwise exact access ---------------------------------------------

    def shoot(self, q) -> ShootResult:
        """Inverse exponential map at q, cached, warm-started from the grid."""
        q = np.asarray(q, dtype=float)
        key = tuple(np.round(q, 12))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        w0 = self._warm_start(q)
        ws, rhos, states, its, ok = shoot_batch(
            self.spec, self.p, q[None], w0=w0, tol=self.shoot_tol
        )
        if not ok[0]:
            raise NoConvergence(f"point {q.tolist()} outside I^-(p) or near its boundary")
        V3 = rapidity_to_dir(ws[0])
        s1, s2 = chart_seeds(V3[None])
        tau_q = float(self.p[0] - q[0])
        fan = integrate_fan(self.spec, self.p, V3[None], s1, s2, np.array([tau_q]))
        res = ShootResult(
            V=V3, rho=float(rhos[0]), tau=tau_q, state=states[0], fan=fan, iterations=int(its[0])
        )
        if len(self._cache) > 50000:
            self._cache.clear()
        self._cache[key] = res
        return res

    def _warm_start(self, q) -> np.ndarray | None:
        it = int(np.clip(np.searchsorted(self.t_levels, q[0]), 0, len(self.t_levels) - 1))
        ix = int(np.clip(np.searchsorted(self.xs, q[1]), 0, len(self.xs) - 1))
        iy = int(np.clip(np.searchsorted(self.ys, q[2]), 0, len(self.ys) - 1))
        cand = self.w[it, ix, iy]
        if np.isfinite(cand).all():
            return cand[None, :]
        return None

    def rho_at(self, q) -> float:
        return self.shoot(q).rho

    def grad_rho_at(self, q) -> np.ndarray:
        """Exact d_a rho from the maximizing geodesic: d rho = -g(B, .)."""
        sr = self.shoot(q)
        g, _, _ = metric_arrays(self.spec, np.asarray(q, float)[None], order=1)
        return -np.einsum("ab,b->a", g[0], sr.u)

    # -- serialization -------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        nt, nx, ny = self.rho.shape
        head = (
            _MAGIC
            + struct.pack("<I", _VERSION)
            + self.metric_hash.encode("ascii")
            + struct.pack("<3d", *self.p)
            + struct.pack("<d", self.t0)
            + struct.pack("<3I", nt, nx, ny)
            + struct.pack("<4d", self.xs[0], self.xs[-1], self.ys[0], self.ys[-1])
        )
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(self.rho.astype("<f8").tobytes())
            fh.write(self.grad.astype("<f8").tobytes())
            fh.write(self.w.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, spec: MetricSpec) -> "RhoField":
        """Load a cache written by ``save``; the metric hash must match."""
        path = Path(path)
        raw = path.read_bytes()
        if raw[:4] != _MAGIC:
            raise ValueError(f"{path} is not a rho-field cache")
        off = 4
        (version,) = struct.unpack_from("<I", raw, off)
        off += 4
        if version != _VERSION:
            raise ValueError(f"cache version {version} != {_VERSION}")
        hash_stored = raw[off : off + 32].decode("ascii")
        off += 32
        if hash_stored != spec.metric_hash():
            raise ValueError("metric hash mismatch: cache invalid for this spec")
        p = np.array(struct.unpack_from("<3d", raw, off))
        off += 24
        (t0,) = struct.unpack_from("<d", raw, off)
        off += 8
        nt, nx, ny = struct.unpack_from("<3I", raw, off)
        off += 12
        x0, x1, y0, y1 = struct.unpack_from("<4d", raw, off)
        off += 32
        cnt = nt * nx * ny
        rho = np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(nt, nx, ny).copy()
        off += cnt * 8
        grad = (
            np.frombuffer(raw, dtype="<f8", count=cnt * 3, offset=off)
            .reshape(nt, nx, ny, 3)
            .copy()
        )
        off += cnt * 24
        w = (
            np.frombuffer(raw, dtype="<f8", count=cnt * 2, offset=off)
            .reshape(nt, nx, ny, 2)
            .copy()
        )
        return cls(
            spec=spec,
            p=p,
            t0=t0,
            t_levels=np.linspace(t0, p[0], nt),
            xs=np.linspace(x0, x1, nx),
            ys=np.linspace(y0, y1, ny),
            rho=rho,
            grad=grad,
            w=w,
            metric_hash=hash_stored,
        )


def build_rho_field(spec: MetricSpec, p, t0: float, resolution=(24, 33, 33), **kw) -> RhoField:
    """Convenience wrapper over RhoField.build."""
    return RhoField.build(spec, p, t0, resolution=resolution, **kw)
