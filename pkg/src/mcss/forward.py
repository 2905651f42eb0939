"""Forward dynamics: Euler simulation and the Markov-chain lattice.

The lattice is a uniform spatial grid shared by all time layers.  Each control
value gets its own sparse transition matrix built from

* a trinomial diffusion move with mean ``(b - sum_i nu_i beta_i) dt`` (the
  compensator of the jumps is folded into the drift), using central
  probabilities where they are nonnegative and upwinded ones elsewhere;
* one jump branch per mark with mass ``nu_i dt`` landing at ``x + beta_i``,
  linearly interpolated onto the two bracketing nodes and clamped to the box;
* zero-flux closure: diffusion mass that would leave the box stays put.

Coefficients do not depend on time, so kernels are shared across layers.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import sparse

from .errors import NumericError, SchemeError, ValidationError
from .model import ProblemSpec

log = logging.getLogger(__name__)

_BLOCK = 4096  # paths per random stream; fixed so results ignore thread count


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValidationError("n_steps must be >= 1")
        if not self.T > self.t0:
            raise ValidationError("T must exceed t0")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = self.t0 + self.dt * np.arange(self.n_steps + 1)
        t[-1] = self.T
        return t

    def sub(self, k0: int, k1: int) -> "TimeGrid":
        t = self.times
        return TimeGrid(float(t[k0]), float(t[k1]), k1 - k0)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathBatch:
    times: TimeGrid
    states: np.ndarray          # (n_paths, n_steps + 1)
    jump_log: tuple             # (path index, layer, mark) arrays
    seed: int

    def jumps_of(self, path: int) -> list:
        p, k, i = self.jump_log
        sel = p == path
        return list(zip(k[sel].tolist(), i[sel].tolist()))

    def to_csv(self, path) -> None:
        t = self.times.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "t", "x"])
            for p in range(self.states.shape[0]):
                for k in range(self.states.shape[1]):
                    w.writerow([p, f"{t[k]:.17g}", f"{self.states[p, k]:.17g}"])


def _control_fn(spec: ProblemSpec, policy) -> Callable:
    if policy is None:
        a0 = spec.controls.values[0]
        return lambda k, x: np.full(x.shape, a0)
    if callable(policy):
        return policy
    a0 = float(policy)
    return lambda k, x: np.full(x.shape, a0)


def _simulate_block(spec, ctrl, x0, grid, n, seq):
    rng = np.random.default_rng(seq)
    co = spec.coefficients
    nu = spec.marks.nu
    m = nu.size
    dt = grid.dt
    times = grid.times
    X = np.empty((n, grid.n_steps + 1))
    X[:, 0] = x0
    jp, jk, ji = [], [], []
    for k in range(grid.n_steps):
        x = X[:, k]
        a = np.asarray(ctrl(k, x), dtype=float) * np.ones_like(x)
        drift = np.asarray(co.b(x, a), dtype=float) * np.ones_like(x)
        vol = np.asarray(co.sigma(x, a), dtype=float) * np.ones_like(x)
        step = x + drift * dt + vol * np.sqrt(dt) * rng.standard_normal(n)
        if m:
            jumps = rng.random((n, m)) < nu * dt
            for i in range(m):
                beta = np.asarray(co.beta(x, a, i), dtype=float) * np.ones_like(x)
                step = step + beta * (jumps[:, i] - nu[i] * dt)
            p_idx, i_idx = np.nonzero(jumps)
            jp.append(p_idx)
            jk.append(np.full(p_idx.size, k + 1))
            ji.append(i_idx)
        bad = ~np.isfinite(step)
        if bad.any():
            j = int(np.argmax(bad))
            raise NumericError(
                f"non-finite state at step k={k}, t={times[k]:.6g}, x={x[j]!r}, a={a[j]!r}")
        X[:, k + 1] = step
    cat = (lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=int))
    return X, (cat(jp), cat(jk), cat(ji))


def simulate_paths(spec: ProblemSpec, policy, x0: float, grid: TimeGrid, n_paths: int,
                   seed: int = 0, threads: int = 1) -> PathBatch:
    """Euler-Maruyama paths with Bernoulli-thinned compensated jumps.

    ``policy`` is ``None`` (first control), a constant control value or a
    callable ``(layer, x_array) -> control values``.  Paths are split into
    fixed-size blocks, each with its own spawned stream, so output does not
    depend on ``threads``.
    """
    lam = spec.marks.total_mass
    if grid.dt * lam >= 1:
        raise SchemeError(f"dt * sum(nu) = {grid.dt * lam:.4g} must be < 1",
                          max_dt=1.0 / lam)
    ctrl = _control_fn(spec, policy)
    n_blocks = -(-n_paths // _BLOCK)
    seqs = np.random.SeedSequence(seed).spawn(n_blocks)
    sizes = [min(_BLOCK, n_paths - b * _BLOCK) for b in range(n_blocks)]

    def work(b):
        return _simulate_block(spec, ctrl, x0, grid, sizes[b], seqs[b])

    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(n_blocks)))
    else:
        results = [work(b) for b in range(n_blocks)]

    states = np.concatenate([r[0] for r in results], axis=0)
    offsets = np.cumsum([0] + sizes[:-1])
    jp = np.concatenate([r[1][0] + off for r, off in zip(results, offsets)])
    jk = np.concatenate([r[1][1] for r in results])
    ji = np.concatenate([r[1][2] for r in results])
    return PathBatch(times=grid, states=states, jump_log=(jp, jk, ji), seed=seed)


# ---------------------------------------------------------------------------
# lattice
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    """Markov-chain approximation of the controlled state on a uniform grid.

    ``P[q]`` is the transition matrix under control index ``q``.  ``W[q]``
    holds ``sum_branch p * xi_W`` per target, so ``Z = W[q] @ Y / dt``.
    ``J[q][i]`` interpolates a layer function at ``x + beta_i``.
    """

    spec: ProblemSpec
    times: TimeGrid
    x: np.ndarray
    P: tuple
    W: tuple
    J: tuple
    xi2: tuple                  # per control: row sums of p * xi_W**2
    x0_index: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dt(self) -> float:
        return self.times.dt

    @property
    def n_nodes(self) -> int:
        return self.x.size

    @property
    def n_steps(self) -> int:
        return self.times.n_steps

    @property
    def n_controls(self) -> int:
        return len(self.P)

    @property
    def layers(self) -> list:
        return [self.x for _ in range(self.n_steps + 1)]

    @property
    def x0(self) -> float:
        return float(self.x[self.x0_index])

    def kernel(self, k: int, q: int):
        return self.P[q]

    def index_of(self, x0: float) -> int:
        j = int(np.argmin(np.abs(self.x - x0)))
        if abs(self.x[j] - x0) > 1e-9 * max(1.0, self.dx):
            raise ValidationError(f"x0={x0} is not a lattice node")
        return j

    def restrict(self, k0: int, k1: int) -> "Lattice":
        """The same chain on layers ``k0..k1`` (re-indexed from 0)."""
        if not 0 <= k0 < k1 <= self.n_steps:
            raise ValidationError(f"bad layer range [{k0}, {k1}]")
        return replace(self, times=self.times.sub(k0, k1))

    def with_x0(self, x0: float) -> "Lattice":
        return replace(self, x0_index=self.index_of(x0))

    def to_diagnostic_json(self) -> str:
        out = {
            "n_layers": self.n_steps + 1,
            "layer_sizes": [int(self.n_nodes)] * (self.n_steps + 1),
            "x_min": float(self.x[0]),
            "x_max": float(self.x[-1]),
            "dx": self.dx,
            "dt": self.dt,
            "n_controls": self.n_controls,
        }
        out.update(self.diagnostics)
        return json.dumps(out, indent=2, sort_keys=True)


def _interp_targets(y, x_min, dx, n):
    """Bracketing index and weight for clamped linear interpolation."""
    s = (y - x_min) / dx
    s_round = np.round(s)
    s = np.where(np.abs(s - s_round) < 1e-9, s_round, s)
    lo = np.clip(np.floor(s).astype(int), 0, n - 2)
    w = s - lo
    return lo, w


def interp_variance(x, beta, nu, x_min, x_max, dx):
    """Sum_i nu_i w_i (1 - w_i) dx^2: variance added by interpolating jump targets."""
    out = np.zeros(x.size)
    for i in range(nu.size):
        yi = np.clip(x + beta[:, i], x_min, x_max)
        _, wi = _interp_targets(yi, x_min, dx, x.size)
        out += nu[i] * wi * (1 - wi) * dx ** 2
    return out


def central_mask(s, btil, interp_var, dx):
    """Nodes where central first differences keep the stencil monotone.

    Shared by the lattice and the finite-difference scheme so both routes
    switch to upwinding at the same nodes.
    """
    return s ** 2 - interp_var >= np.abs(btil) * dx


def build_lattice(spec: ProblemSpec, x_min: float, x_max: float, n_space: int,
                  grid: TimeGrid, x0: Optional[float] = None) -> Lattice:
    if not x_min < x_max:
        raise ValidationError("x_min must be < x_max")
    if n_space < 3:
        raise ValidationError("n_space must be >= 3")
    n = n_space + 1
    x = np.linspace(x_min, x_max, n)
    dx = (x_max - x_min) / n_space
    dt = grid.dt
    nu = spec.marks.nu
    m = nu.size
    lam = float(nu.sum())
    co = spec.coefficients
    if dt * lam >= 1:
        raise SchemeError(f"dt * sum(nu) = {dt * lam:.4g} must be < 1", max_dt=1.0 / lam)

    idx = np.arange(n)
    P, W, J, XI2 = [], [], [], []
    worst_rate = 0.0
    upwind_nodes = 0
    clamped = 0
    min_stay = 1.0
    for a in spec.controls.values:
        a_arr = np.full(n, a)
        b = np.asarray(co.b(x, a_arr), dtype=float) * np.ones(n)
        s = np.asarray(co.sigma(x, a_arr), dtype=float) * np.ones(n)
        beta = np.stack([np.asarray(co.beta(x, a_arr, i), dtype=float) * np.ones(n)
                         for i in range(m)], axis=1) if m else np.zeros((n, 0))
        for arr, nm in ((b, "b"), (s, "sigma"), (beta, "beta")):
            if not np.all(np.isfinite(arr)):
                j = int(np.argmax(~np.isfinite(arr).reshape(n, -1).all(axis=1)))
                raise NumericError(f"non-finite {nm} at x={x[j]!r}, a={a!r}")
        btil = b - beta @ nu
        # interpolation of off-grid jump targets adds w(1-w)dx^2 of variance
        interp_var = interp_variance(x, beta, nu, x_min, x_max, dx)
        rate = (s ** 2 + np.maximum(np.abs(b), np.abs(btil)) * dx) / dx ** 2 + lam
        worst_rate = max(worst_rate, float(rate.max()))
        # exact second moment: (pu + pd) dx^2 = sigma^2 dt + (b dt)^2 - interp
        second = np.maximum(s ** 2 * dt + (b * dt) ** 2 - interp_var * dt, 0.0)
        central = central_mask(s, btil, interp_var, dx)
        upwind_nodes += int(np.count_nonzero(~central))
        pu = np.where(central, 0.5 * second / dx ** 2 + 0.5 * btil * dt / dx,
                      0.5 * s ** 2 * dt / dx ** 2 + np.maximum(btil, 0.0) * dt / dx)
        pd = np.where(central, 0.5 * second / dx ** 2 - 0.5 * btil * dt / dx,
                      0.5 * s ** 2 * dt / dx ** 2 + np.maximum(-btil, 0.0) * dt / dx)
        stay = 1.0 - pu - pd - lam * dt
        min_stay = min(min_stay, float(stay.min()))

        up_t = np.minimum(idx + 1, n - 1)
        dn_t = np.maximum(idx - 1, 0)
        d_up = np.where(idx < n - 1, dx, 0.0)
        d_dn = np.where(idx > 0, -dx, 0.0)
        ed = pu * d_up + pd * d_dn
        var_d = pu * d_up ** 2 + pd * d_dn ** 2 - ed ** 2
        c = np.where(var_d > 1e-300, np.sqrt(dt / np.maximum(var_d, 1e-300)), 0.0)

        rows = [idx, idx, idx]
        cols = [up_t, dn_t, idx]
        vals = [pu, pd, stay]
        wvals = [pu * (d_up - ed) * c, pd * (d_dn - ed) * c, stay * (-ed * c)]
        Jq = []
        for i in range(m):
            y = x + beta[:, i]
            out = (y < x_min - 1e-12) | (y > x_max + 1e-12)
            clamped += int(np.count_nonzero(out))
            lo, w = _interp_targets(np.clip(y, x_min, x_max), x_min, dx, n)
            pj = nu[i] * dt
            rows += [idx, idx]
            cols += [lo, lo + 1]
            vals += [pj * (1 - w), pj * w]
            wvals += [pj * (1 - w) * (-ed * c), pj * w * (-ed * c)]
            Jq.append(sparse.csr_matrix(
                (np.concatenate([1 - w, w]), (np.concatenate([idx, idx]),
                                              np.concatenate([lo, lo + 1]))), shape=(n, n)))
        r = np.concatenate(rows)
        cc = np.concatenate(cols)
        P.append(sparse.csr_matrix((np.concatenate(vals), (r, cc)), shape=(n, n)))
        W.append(sparse.csr_matrix((np.concatenate(wvals), (r, cc)), shape=(n, n)))
        J.append(tuple(Jq))
        XI2.append(c ** 2 * var_d)

    if dt * worst_rate > 1 + 1e-12 or min_stay < -1e-15:
        raise SchemeError(
            f"lattice CFL violated: dt={dt:.6g} > max admissible {1.0 / worst_rate:.6g}",
            max_dt=1.0 / worst_rate)
    if clamped:
        log.info("lattice: %d jump targets clamped to [%g, %g]", clamped, x_min, x_max)

    if x0 is None:
        j0 = int(np.argmin(np.abs(x - spec.x0)))
        if abs(x[j0] - spec.x0) > 1e-9 * max(1.0, dx):
            j0 = n // 2
    else:
        j0 = int(np.argmin(np.abs(x - x0)))
        if abs(x[j0] - x0) > 1e-9 * max(1.0, dx):
            raise ValidationError(f"x0={x0} is not a lattice node")

    diagnostics = {
        "cfl_max_dt": 1.0 / worst_rate if worst_rate > 0 else None,
        "cfl_margin": 1.0 - dt * worst_rate,
        "upwind_nodes": upwind_nodes,
        "clamped_jump_targets": clamped,
    }
    return Lattice(spec=spec, times=grid, x=x, P=tuple(P), W=tuple(W), J=tuple(J),
                   xi2=tuple(XI2), x0_index=j0, diagnostics=diagnostics)


@dataclass
class ConsistencyReport:
    mean_error: float
    var_error: float
    tol: float
    bad_rows: list
    worst_mean_row: tuple
    worst_var_row: tuple
    upwind_nodes: int = 0
    upwind_excess: float = 0.0      # worst variance excess over |b~| dx dt

    @property
    def passed(self) -> bool:
        return (not self.bad_rows and self.mean_error <= self.tol
                and self.var_error <= self.tol and self.upwind_excess <= self.tol)

    def to_dict(self) -> dict:
        return {"pass": self.passed, "mean_error": self.mean_error,
                "var_error": self.var_error, "tol": self.tol,
                "upwind_nodes": self.upwind_nodes, "upwind_excess": self.upwind_excess,
                "bad_rows": [list(r) for r in self.bad_rows],
                "worst_mean_row": list(self.worst_mean_row),
                "worst_var_row": list(self.worst_var_row)}


def local_consistency_check(lat: Lattice, spec: Optional[ProblemSpec] = None) -> ConsistencyReport:
    """Compare kernel moments with drift and total variance at interior nodes.

    Interior excludes the two boundary nodes and nodes whose jump targets
    were clamped.  Rows that are not probability vectors are listed as
    ``(control, node)`` in ``bad_rows``.  Upwinded nodes cannot match the
    variance with nearest-neighbour moves; there the excess over the
    numerical diffusion |b~| dx dt is checked instead.
    """
    spec = spec or lat.spec
    co = spec.coefficients
    nu = spec.marks.nu
    x, dt, n = lat.x, lat.dt, lat.n_nodes
    tol = 10 * dt ** 2
    mean_err = var_err = up_excess = 0.0
    n_up = 0
    worst_m = worst_v = (-1, -1)
    bad = []
    for q, a in enumerate(spec.controls.values):
        Pq = lat.P[q]
        dense_rows = Pq.toarray()
        row_ok = (np.abs(dense_rows.sum(axis=1) - 1) <= 1e-12) & (dense_rows.min(axis=1) >= -1e-15)
        bad += [(q, int(j)) for j in np.nonzero(~row_ok)[0]]
        a_arr = np.full(n, a)
        b = np.asarray(co.b(x, a_arr), dtype=float) * np.ones(n)
        s = np.asarray(co.sigma(x, a_arr), dtype=float) * np.ones(n)
        interior = np.ones(n, dtype=bool)
        interior[[0, -1]] = False
        beta = (np.stack([np.asarray(co.beta(x, a_arr, i), dtype=float) * np.ones(n)
                          for i in range(nu.size)], axis=1) if nu.size else np.zeros((n, 0)))
        jump_var = (beta ** 2) @ nu if nu.size else np.zeros(n)
        for i in range(nu.size):
            y = x + beta[:, i]
            interior &= (y >= x[0] - 1e-12) & (y <= x[-1] + 1e-12)
        btil = b - beta @ nu if nu.size else b
        iv = interp_variance(x, beta, nu, x[0], x[-1], lat.dx)
        central = central_mask(s, btil, iv, lat.dx)
        ex = Pq @ x
        mean = ex - x
        var = Pq @ (x ** 2) - ex ** 2
        em = np.abs(mean - b * dt)
        ev = np.abs(var - (s ** 2 + jump_var) * dt)
        em[~interior] = 0.0
        up = interior & ~central
        n_up += int(np.count_nonzero(up))
        if up.any():
            excess = ev[up] - np.abs(btil[up]) * lat.dx * dt - iv[up] * dt
            up_excess = max(up_excess, float(np.max(excess)))
        ev[~(interior & central)] = 0.0
        if em.max() > mean_err:
            mean_err, worst_m = float(em.max()), (q, int(np.argmax(em)))
        if ev.max() > var_err:
            var_err, worst_v = float(ev.max()), (q, int(np.argmax(ev)))
    return ConsistencyReport(mean_error=mean_err, var_error=var_err, tol=tol, bad_rows=bad,
                             worst_mean_row=worst_m, worst_var_row=worst_v,
                             upwind_nodes=n_up, upwind_excess=max(up_excess, 0.0))
