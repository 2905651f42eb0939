"""Explicit finite-difference solver for the HJB variational inequality.

    min(u - h, inf_a(-du/dt - L^a u - f(a, t, x, u, sigma du/dx, B^a u))) = 0,
    u(T, .) = g,   L^a = A^a + K^a.

The scheme steps backward explicitly on the previous layer, so it is
monotone under the stability bound checked in ``PIDEScheme``.  The first
difference is central where that keeps the stencil monotone and upwinded
otherwise, using the same node test as the lattice; the same operator serves the
drift and the jump compensator, so K^a annihilates affine functions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .bsde import Policy
from .control import ValueSurface, solve_value
from .errors import SchemeError, ValidationError
from .forward import (Lattice, TimeGrid, _interp_targets, build_lattice, central_mask,
                      interp_variance)
from .model import OBSTACLE_OFF, ProblemSpec, obstacle_values

BOUNDARIES = ("reflecting", "dirichlet-from-g")


@dataclass(frozen=True)
class SpatialGrid:
    x_min: float
    x_max: float
    n_space: int

    def __post_init__(self):
        if self.n_space < 3:
            raise ValidationError("n_space must be >= 3")
        if not self.x_min < self.x_max:
            raise ValidationError("x_min must be < x_max")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_space

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_space + 1)

    @property
    def n_nodes(self) -> int:
        return self.n_space + 1


@dataclass(frozen=True)
class PIDEScheme:
    times: TimeGrid
    space: SpatialGrid
    cfl_margin: float = 0.05
    boundary: str = "reflecting"

    def __post_init__(self):
        if self.cfl_margin < 0.05:
            raise ValidationError("cfl_margin must be >= 0.05")
        if self.boundary not in BOUNDARIES:
            raise ValidationError(f"boundary must be one of {BOUNDARIES}")

    def stability_rate(self, spec: ProblemSpec) -> float:
        """max over grid and controls of sigma^2/dx^2 + |b|/dx + sum(nu) + C."""
        x, dx = self.space.x, self.space.dx
        co = spec.coefficients
        worst = 0.0
        for a in spec.controls.values:
            aa = np.full(x.shape, a)
            s = np.asarray(co.sigma(x, aa), float) * np.ones_like(x)
            b = np.asarray(co.b(x, aa), float) * np.ones_like(x)
            worst = max(worst, float(np.max(s ** 2 / dx ** 2 + np.abs(b) / dx)))
        return worst + spec.marks.total_mass + spec.driver.lipschitz_C

    def check(self, spec: ProblemSpec) -> None:
        rate = self.stability_rate(spec)
        limit = 1.0 - self.cfl_margin
        if self.times.dt * rate > limit:
            raise SchemeError(
                f"explicit stability violated: dt={self.times.dt:.6g} > max admissible "
                f"{limit / rate:.6g}", max_dt=limit / rate)

    @classmethod
    def matching(cls, lat: Lattice, **kw) -> "PIDEScheme":
        """Scheme on the lattice's own time and space grid."""
        return cls(lat.times, SpatialGrid(float(lat.x[0]), float(lat.x[-1]), lat.n_nodes - 1), **kw)


@dataclass(frozen=True)
class GeneratorTerms:
    A: np.ndarray       # diffusion + drift part
    K: np.ndarray       # compensated jump integral
    B: np.ndarray       # (N, m) jump differences for the k-slot
    z: np.ndarray       # sigma * central du/dx for the z-slot

    @property
    def L(self) -> np.ndarray:
        return self.A + self.K


def _coeffs(spec: ProblemSpec, x: np.ndarray, a: float):
    co = spec.coefficients
    aa = np.full(x.shape, a)
    b = np.asarray(co.b(x, aa), float) * np.ones_like(x)
    s = np.asarray(co.sigma(x, aa), float) * np.ones_like(x)
    m = spec.marks.m
    beta = (np.stack([np.asarray(co.beta(x, aa, i), float) * np.ones_like(x) for i in range(m)],
                     axis=1) if m else np.zeros(x.shape + (0,)))
    return b, s, beta


def apply_generator(spec: ProblemSpec, space: SpatialGrid, u: np.ndarray, a: float,
                    t: float = 0.0) -> GeneratorTerms:
    """A^a u, K^a u, B^a u and sigma du/dx on one layer.

    Boundaries use a mirrored ghost node (zero flux); jump targets outside the
    box are clamped, as on the lattice.  The coefficients are time-homogeneous,
    ``t`` is accepted for interface symmetry.
    """
    u = np.asarray(u, dtype=float)
    x, dx = space.x, space.dx
    if u.shape != x.shape:
        raise ValidationError(f"layer has {u.shape} values for {x.size} nodes")
    b, s, beta = _coeffs(spec, x, a)
    nu = spec.marks.nu
    btil = b - beta @ nu if nu.size else b

    up = np.r_[u[1:], u[-1]]
    dn = np.r_[u[0], u[:-1]]
    d2 = (up - 2.0 * u + dn) / dx ** 2
    dc = (up - dn) / (2.0 * dx)
    central = central_mask(s, btil, interp_variance(x, beta, nu, space.x_min, space.x_max, dx),
                           dx)
    d1 = np.where(central, dc, np.where(btil > 0, (up - u) / dx, (u - dn) / dx))

    A = 0.5 * s ** 2 * d2 + b * d1
    n = x.size
    B = np.zeros((n, nu.size))
    K = np.zeros(n)
    for i in range(nu.size):
        y = np.clip(x + beta[:, i], space.x_min, space.x_max)
        lo, w = _interp_targets(y, space.x_min, dx, n)
        B[:, i] = (1 - w) * u[lo] + w * u[lo + 1] - u
        K += nu[i] * (B[:, i] - beta[:, i] * d1)
    return GeneratorTerms(A=A, K=K, B=B, z=s * dc)


def _bar_h_layers(spec: ProblemSpec, scheme: PIDEScheme) -> np.ndarray:
    t = scheme.times.times
    x = scheme.space.x
    return np.stack([obstacle_values(spec, float(tk), x) for tk in t])


def solve_hjbvi(spec: ProblemSpec, scheme: PIDEScheme, with_branch: bool = False):
    """Explicit backward stepping of the variational inequality.

    u_k = max(h_k, max_a[u_{k+1} + dt (L^a u_{k+1} + f(a, t_k, x, u_{k+1}, z, B^a u_{k+1}))])
    with u_n = g and no reflection at the horizon.  Ties in the control max
    go to the lowest index.  Returns a ValueSurface, plus the active branch
    labels when ``with_branch``.
    """
    scheme.check(spec)
    x = scheme.space.x
    n, dt = scheme.times.n_steps, scheme.times.dt
    t = scheme.times.times
    N = x.size
    obs = _bar_h_layers(spec, scheme)
    g = np.asarray(spec.rewards.g(x), float) * np.ones(N)
    ctrl = spec.controls.array
    f = spec.driver.f

    u = np.empty((n + 1, N))
    choice = np.zeros((n + 1, N), dtype=int)
    stop = np.zeros((n + 1, N), dtype=bool)
    u[n] = g
    stop[n] = True
    for k in range(n - 1, -1, -1):
        nxt = u[k + 1]
        cand = np.empty((ctrl.size, N))
        for q, a in enumerate(ctrl):
            gt = apply_generator(spec, scheme.space, nxt, float(a), float(t[k]))
            cand[q] = nxt + dt * (gt.L + np.asarray(
                f(np.full(N, a), float(t[k]), x, nxt, gt.z, gt.B), float))
        q_best = np.argmax(cand, axis=0)
        cont = cand[q_best, np.arange(N)]
        if not np.all(np.isfinite(cont)):
            raise SchemeError(f"non-finite HJBVI value at t={t[k]:.6g}")
        on = obs[k] > OBSTACLE_OFF * 0.5
        stop[k] = on & (obs[k] >= cont)
        row = np.where(stop[k], obs[k], cont)
        if scheme.boundary == "dirichlet-from-g":
            row[0], row[-1] = max(g[0], obs[k, 0]), max(g[-1], obs[k, -1])
        u[k] = row
        choice[k] = q_best
    surface = ValueSurface(u=u, policy=Policy(choice), stop_region=stop, times=t, x=x,
                           controls=ctrl, meta={"route": "pide", "dt": dt,
                                                "dx": scheme.space.dx,
                                                "boundary": scheme.boundary})
    if with_branch:
        return surface, np.where(stop, "obstacle", "pde")
    return surface


# ---------------------------------------------------------------------------
# viscosity residual
# ---------------------------------------------------------------------------

def interior_mask(x: np.ndarray, band: float = 0.1) -> np.ndarray:
    lo, hi = float(x[0]), float(x[-1])
    w = band * (hi - lo)
    return (x >= lo + w - 1e-12) & (x <= hi - w + 1e-12)


@dataclass
class ResidualReport:
    max_abs: float
    tol: float
    worst: list               # [(k, j, t, x, R)] largest offenders
    branch_counts: dict
    dt: float
    dx: float

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tol

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "tol": self.tol, "pass": self.passed,
                "dt": self.dt, "dx": self.dx, "branch_counts": self.branch_counts,
                "worst": [list(w) for w in self.worst]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def residual_field(surface: ValueSurface, spec: ProblemSpec, scheme: PIDEScheme):
    """R and active branch at every (k < n, node); layer n is NaN."""
    u = surface.u
    x = scheme.space.x
    n, dt = scheme.times.n_steps, scheme.times.dt
    if u.shape != (n + 1, x.size):
        raise ValidationError("surface does not match the scheme grid")
    t = scheme.times.times
    obs = _bar_h_layers(spec, scheme)
    f = spec.driver.f
    R = np.full(u.shape, np.nan)
    branch = np.full(u.shape, "", dtype=object)
    N = x.size
    for k in range(n):
        pde = np.full(N, np.inf)
        for a in spec.controls.array:
            gt = apply_generator(spec, scheme.space, u[k], float(a), float(t[k]))
            val = (-(u[k + 1] - u[k]) / dt - gt.L
                   - np.asarray(f(np.full(N, a), float(t[k]), x, u[k], gt.z, gt.B), float))
            pde = np.minimum(pde, val)
        gap = np.where(obs[k] > OBSTACLE_OFF * 0.5, u[k] - obs[k], np.inf)
        R[k] = np.minimum(gap, pde)
        branch[k] = np.where(gap <= pde, "obstacle", "pde")
    return R, branch


def viscosity_residual(surface: ValueSurface, spec: ProblemSpec, scheme: PIDEScheme,
                       band: float = 0.1, n_worst: int = 5,
                       tol: Optional[float] = None,
                       time_band: Optional[float] = None) -> ResidualReport:
    """Discrete residual of the variational inequality at interior points.

    Derivatives are taken at the same layer the residual is reported on, so
    an explicit solution leaves an O(dt + dx) residual instead of matching
    its own update exactly.  Interior means the central sub-box in space and
    layers at least ``time_band * T`` before the horizon (default ``band``):
    a kinked g leaves an O(1/dx) boundary layer at t = T that does not
    shrink under refinement.
    """
    R, branch = residual_field(surface, spec, scheme)
    inner = interior_mask(scheme.space.x, band)
    n = scheme.times.n_steps
    t = scheme.times.times
    tb = band if time_band is None else time_band
    n_in = int(np.count_nonzero(t[:n] <= t[n] - tb * (t[n] - t[0]) + 1e-12))
    Ri = np.abs(R[:n_in][:, inner])
    tol = 10.0 * (scheme.times.dt + scheme.space.dx) if tol is None else tol
    cols = np.flatnonzero(inner)
    order = np.argsort(Ri, axis=None)[::-1][:n_worst]
    worst = []
    for flat in order:
        k, jj = np.unravel_index(flat, Ri.shape)
        j = int(cols[jj])
        worst.append((int(k), j, float(scheme.times.times[k]), float(scheme.space.x[j]),
                      float(R[k, j])))
    br = branch[:n_in][:, inner]
    counts = {"obstacle": int(np.count_nonzero(br == "obstacle")),
              "pde": int(np.count_nonzero(br == "pde"))}
    return ResidualReport(max_abs=float(Ri.max()) if Ri.size else 0.0, tol=tol, worst=worst,
                          branch_counts=counts, dt=scheme.times.dt, dx=scheme.space.dx)


# ---------------------------------------------------------------------------
# cross-validation of the two routes
# ---------------------------------------------------------------------------

@dataclass
class CrossReport:
    rows: list                  # per rung: n_steps, n_space, dt, dx, err, (err_exact)
    tol: float
    scale: float
    band: float
    excluded: list = dc_field(default_factory=list)

    @property
    def errors(self) -> list:
        return [r["err"] for r in self.rows]

    @property
    def monotone(self) -> bool:
        e = self.errors
        return all(b < a for a, b in zip(e, e[1:]))

    @property
    def passed(self) -> bool:
        return self.monotone and self.errors[-1] <= self.tol

    def orders(self, key: str = "err") -> list:
        out = []
        for a, b in zip(self.rows, self.rows[1:]):
            if a[key] > 0 and b[key] > 0:
                out.append(math.log(a[key] / b[key]) / math.log(a["dt"] / b["dt"]))
            else:
                out.append(float("nan"))
        return out

    def to_dict(self) -> dict:
        return {"rows": self.rows, "tol": self.tol, "scale": self.scale, "band": self.band,
                "monotone": self.monotone, "pass": self.passed, "orders": self.orders(),
                "excluded": self.excluded}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        keys = ["n_steps", "n_space", "dt", "dx", "err"]
        if self.rows and "err_exact" in self.rows[0]:
            keys.append("err_exact")
        with open(path, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for r in self.rows:
                fh.write(",".join(f"{r[k]:.17g}" if isinstance(r[k], float) else str(r[k])
                                  for k in keys) + "\n")


def compare_routes(spec: ProblemSpec, lat: Lattice, scheme: PIDEScheme, band: float = 0.1,
                   exact=None, exclude=None) -> dict:
    """Sup distance between the chain and PIDE surfaces on the central sub-box."""
    if (lat.n_steps != scheme.times.n_steps or lat.n_nodes != scheme.space.n_nodes
            or not np.allclose(lat.x, scheme.space.x, rtol=0, atol=1e-12)
            or not np.isclose(lat.times.T, scheme.times.T)
            or not np.isclose(lat.times.t0, scheme.times.t0)):
        raise ValidationError("lattice and PIDE scheme are built on different grids")
    u_chain = solve_value(lat).u
    u_pide = solve_hjbvi(spec, scheme).u
    mask = interior_mask(lat.x, band)
    if exclude is not None:
        lo, hi = exclude
        mask &= ~((lat.x >= lo) & (lat.x <= hi))
    diff = np.abs(u_chain - u_pide)[:, mask]
    row = {"n_steps": lat.n_steps, "n_space": lat.n_nodes - 1, "dt": lat.dt, "dx": lat.dx,
           "err": float(diff.max())}
    if exact is not None:
        j = lat.x0_index
        ref = float(exact)
        row["err_exact"] = max(abs(float(u_chain[0, j]) - ref), abs(float(u_pide[0, j]) - ref))
    return row


def cross_validate(spec: ProblemSpec, lat: Lattice, scheme: PIDEScheme, refine: int = 3,
                   band: float = 0.1, space_factor: int = 1, exact=None,
                   exclude=None) -> CrossReport:
    """Compare both routes over a refinement ladder starting at (lat, scheme).

    Each rung doubles n_steps and multiplies n_space by ``space_factor``.
    ``exact`` is an optional reference value u(t0, x0); ``exclude`` an
    optional (lo, hi) band removed from the comparison, typically around a
    discontinuity of g.
    """
    if refine < 1:
        raise ValidationError("refine must be >= 1")
    x_min, x_max = float(lat.x[0]), float(lat.x[-1])
    rows = []
    for r in range(refine):
        if r == 0:
            la, sc = lat, scheme
        else:
            grid = TimeGrid(lat.times.t0, lat.times.T, lat.n_steps * 2 ** r)
            ns = (lat.n_nodes - 1) * space_factor ** r
            la = build_lattice(spec, x_min, x_max, ns, grid, x0=lat.x0)
            sc = PIDEScheme(grid, SpatialGrid(x_min, x_max, ns), scheme.cfl_margin,
                            scheme.boundary)
        rows.append(compare_routes(spec, la, sc, band=band, exact=exact, exclude=exclude))
    x = lat.x
    scale = (float(np.max(np.abs(spec.rewards.g(x)))) + float(np.max(np.abs(np.where(
        obstacle_values(spec, 0.0, x) > OBSTACLE_OFF * 0.5, obstacle_values(spec, 0.0, x), 0.0))))
        + 1.0)
    last = rows[-1]
    tol = 5.0 * (last["dt"] + last["dx"]) * scale
    return CrossReport(rows=rows, tol=tol, scale=scale, band=band,
                       excluded=list(exclude) if exclude is not None else [])


# ---------------------------------------------------------------------------
# independent oracle
# ---------------------------------------------------------------------------

def american_put_binomial(spot: float, strike: float, rate: float, vol: float, T: float,
                          steps: int = 200) -> float:
    """Cox-Ross-Rubinstein tree value of an American put."""
    dt = T / steps
    up = math.exp(vol * math.sqrt(dt))
    dn = 1.0 / up
    disc = math.exp(-rate * dt)
    p = (math.exp(rate * dt) - dn) / (up - dn)
    j = np.arange(steps + 1)
    S = spot * up ** (steps - j) * dn ** j
    V = np.maximum(strike - S, 0.0)
    for i in range(steps - 1, -1, -1):
        S = spot * up ** (i - np.arange(i + 1)) * dn ** np.arange(i + 1)
        V = np.maximum(strike - S, disc * (p * V[:-1] + (1 - p) * V[1:]))
    return float(V[0])
