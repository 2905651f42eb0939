"""Backward solvers on the lattice.

One engine covers plain, reflected and stopped BSDEs.  Each layer is
implicit in ``y`` and explicit in ``(z, k)``::

    E = P_a Y_{k+1},   Z = W_a Y_{k+1} / dt,   K_i = J_{a,i} Y_{k+1} - Y_{k+1}
    y = E + dt f(a, t_k, x, y, Z, K)          (Picard)
    Y_k = max(obstacle_k, y)                  (reflected solves, k < n)

``K`` is the jump difference of the interpolated next layer, which is also
what the finite-difference route feeds into the driver's k-slot.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, NumericError, SchemeError, ValidationError
from .forward import Lattice
from .model import OBSTACLE_OFF, obstacle_values

PICARD_TOL = 1e-13
PICARD_MAX = 50
SNELL_MAX_LAYERS = 5
SNELL_MAX_NODES = 9
SNELL_MAX_BITS = 22
_CHUNK = 1 << 15


@dataclass(frozen=True)
class Policy:
    """Markov control: ``choice[k, j]`` indexes the ControlGrid."""

    choice: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.choice)
        if c.ndim != 2 or not np.issubdtype(c.dtype, np.integer):
            raise ValidationError("policy choice must be a 2-D integer array")
        object.__setattr__(self, "choice", c)

    @classmethod
    def constant(cls, lat: Lattice, q: int = 0) -> "Policy":
        return cls(np.full((lat.n_steps + 1, lat.n_nodes), q, dtype=int))

    def validate(self, lat: Lattice) -> None:
        if self.choice.shape != (lat.n_steps + 1, lat.n_nodes):
            raise ValidationError(
                f"policy shape {self.choice.shape} != {(lat.n_steps + 1, lat.n_nodes)}")
        if self.choice.min() < 0 or self.choice.max() >= lat.n_controls:
            raise ValidationError("policy refers to a control index outside the grid")

    def values(self, lat: Lattice) -> np.ndarray:
        return lat.spec.controls.array[self.choice]


@dataclass(frozen=True)
class StoppingRule:
    """Adapted stopping rule on the lattice.

    Without ``checkpoints`` the chain stops at the first layer ``k`` with
    ``stop[k, X_k]``.  With checkpoints, the first such layer only arms the
    rule, and stopping happens at the first checkpoint layer strictly after
    it (or at the horizon).  That delayed form represents dyadic
    right-shifts of a Markov rule.
    """

    stop: np.ndarray
    checkpoints: Optional[tuple] = None

    def __post_init__(self):
        s = np.asarray(self.stop, dtype=bool)
        if s.ndim != 2:
            raise ValidationError("stopping rule must be a [layer x node] matrix")
        if not s[-1].all():
            raise ValidationError("stopping rule must stop at the horizon layer")
        object.__setattr__(self, "stop", s)
        if self.checkpoints is not None:
            cps = tuple(sorted(int(c) for c in self.checkpoints))
            n = s.shape[0] - 1
            if not cps or cps[-1] != n or cps[0] < 1:
                raise ValidationError("checkpoints must lie in [1, n] and include n")
            object.__setattr__(self, "checkpoints", cps)

    @classmethod
    def at_horizon(cls, lat: Lattice) -> "StoppingRule":
        s = np.zeros((lat.n_steps + 1, lat.n_nodes), dtype=bool)
        s[-1] = True
        return cls(s)

    @classmethod
    def immediate(cls, lat: Lattice) -> "StoppingRule":
        return cls(np.ones((lat.n_steps + 1, lat.n_nodes), dtype=bool))

    @classmethod
    def at_layer(cls, lat: Lattice, k: int) -> "StoppingRule":
        s = np.zeros((lat.n_steps + 1, lat.n_nodes), dtype=bool)
        s[k:] = True
        return cls(s)

    @classmethod
    def first_exit(cls, lat: Lattice, center: float, barrier: float) -> "StoppingRule":
        s = np.abs(lat.x - center)[None, :] >= barrier
        s = np.repeat(s, lat.n_steps + 1, axis=0)
        s[-1] = True
        return cls(s)

    def validate(self, lat: Lattice) -> None:
        if self.stop.shape != (lat.n_steps + 1, lat.n_nodes):
            raise ValidationError(
                f"stopping rule shape {self.stop.shape} != {(lat.n_steps + 1, lat.n_nodes)}")

    def stop_layer(self, path_nodes) -> int:
        """Layer at which a node path (one index per layer) is stopped."""
        path_nodes = np.asarray(path_nodes)
        n = self.stop.shape[0] - 1
        trig = n
        for k in range(n + 1):
            if self.stop[k, path_nodes[k]]:
                trig = k
                break
        if self.checkpoints is None or trig == n:
            return trig
        return next(c for c in self.checkpoints if c > trig)


@dataclass(frozen=True)
class HorizonSpec:
    """Terminal stopping rule ``theta`` with payoff ``xi[k, j]`` on stopped nodes."""

    theta: StoppingRule
    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        object.__setattr__(self, "xi", xi)
        if xi.shape != self.theta.stop.shape:
            raise ValidationError("xi must have the shape of the stopping rule")
        if not np.all(np.isfinite(xi[self.theta.stop])):
            raise ValidationError("xi must be finite on every stopped node")


@dataclass(frozen=True)
class BackwardField:
    Y: np.ndarray               # (n+1, N)
    Z: np.ndarray               # (n+1, N)
    K: np.ndarray               # (n+1, N, m)
    A_inc: np.ndarray           # (n+1, N)
    times: np.ndarray
    x: np.ndarray
    choice: np.ndarray          # control index used at each node
    stopped: np.ndarray         # nodes where theta has stopped the solve
    reflected: np.ndarray       # nodes where the obstacle is active
    meta: dict = field(default_factory=dict)

    def value_at(self, j: int, k: int = 0) -> float:
        return float(self.Y[k, j])

    def to_csv(self, path) -> None:
        m = self.K.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "Y", "Z"] + [f"K_{i + 1}" for i in range(m)] + ["A_inc"])
            for k, t in enumerate(self.times):
                for j, xv in enumerate(self.x):
                    row = [t, xv, self.Y[k, j], self.Z[k, j], *self.K[k, j], self.A_inc[k, j]]
                    w.writerow([f"{v:.17g}" for v in row])


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def _mv(M, Y):
    """Apply sparse M along the node (last) axis of Y."""
    if Y.ndim == 1:
        return M @ Y
    flat = Y.reshape(-1, Y.shape[-1])
    if flat.shape[1] <= 64:
        # batched brute-force sweeps on tiny lattices: dense BLAS is faster
        return (flat @ M.toarray().T).reshape(Y.shape)
    return (M @ flat.T).T.reshape(Y.shape)


def layer_terms(lat: Lattice, q: int, y_next: np.ndarray):
    """Conditional expectation, Z proxy and jump differences under control q."""
    E = _mv(lat.P[q], y_next)
    Z = _mv(lat.W[q], y_next) / lat.dt
    if lat.J[q]:
        K = np.stack([_mv(Jm, y_next) - y_next for Jm in lat.J[q]], axis=-1)
    else:
        K = np.zeros(y_next.shape + (0,))
    return E, Z, K


def picard_solve(f, a, t, x, E, Z, K, dt, lipschitz: float = 1.0):
    """Fixed point of y = E + dt f(a, t, x, y, Z, K).

    A driver with Lipschitz constant 0 cannot depend on y, so one
    evaluation is exact.
    """
    if lipschitz == 0:
        y = E + dt * np.asarray(f(a, t, x, E, Z, K), dtype=float)
        if not np.all(np.isfinite(y)):
            raise NumericError(f"non-finite BSDE value at t={t:.6g}")
        return y
    y = E
    for _ in range(PICARD_MAX):
        y_new = E + dt * np.asarray(f(a, t, x, y, Z, K), dtype=float)
        if not np.all(np.isfinite(y_new)):
            raise NumericError(f"non-finite BSDE value at t={t:.6g}")
        err = float(np.max(np.abs(y_new - y))) if y_new.size else 0.0
        y = y_new
        if err <= PICARD_TOL * max(1.0, float(np.max(np.abs(y))) if y.size else 1.0):
            return y
    raise SchemeError(f"Picard iteration did not converge at t={t:.6g} (last change {err:.3g})")


def continuation(lat: Lattice, k: int, y_next: np.ndarray, driver, *, policy_row=None):
    """Unreflected layer-k value from ``y_next``.

    With ``policy_row`` the control is fixed per node; otherwise every control
    is tried and the largest value wins, ties going to the lowest index.
    Returns ``(y, Z, K, choice)``.
    """
    t = float(lat.times.times[k])
    dt = lat.dt
    x = lat.x
    controls = lat.spec.controls.array
    if policy_row is None:
        qs = range(lat.n_controls)
    else:
        qs = np.unique(policy_row)
    if len(qs) == 1:
        q = int(qs[0])
        E, Z, K = layer_terms(lat, q, y_next)
        y = picard_solve(driver.f, np.full(x.shape, controls[q]), t, x, E, Z, K, dt,
                         driver.lipschitz_C)
        return y, Z, K, np.full(y.shape, q, dtype=int)
    ys, zs, ks = [], [], []
    for q in qs:
        E, Z, K = layer_terms(lat, int(q), y_next)
        a = np.full(x.shape, controls[q])
        ys.append(picard_solve(driver.f, a, t, x, E, Z, K, dt, driver.lipschitz_C))
        zs.append(Z)
        ks.append(K)
    Ys = np.stack(ys)
    if policy_row is None:
        best = np.argmax(Ys, axis=0)
        choice = best
    else:
        lookup = {int(q): i for i, q in enumerate(qs)}
        best = np.vectorize(lookup.get)(policy_row) if len(qs) > 1 else np.zeros_like(policy_row)
        best = np.broadcast_to(best, Ys.shape[1:])
        choice = np.broadcast_to(policy_row, Ys.shape[1:])
    y = np.take_along_axis(Ys, best[None], 0)[0]
    Z = np.take_along_axis(np.stack(zs), best[None], 0)[0]
    K = np.take_along_axis(np.stack(ks), best[None, ..., None], 0)[0]
    return y, Z, K, np.asarray(choice)


def reflect(y, obs):
    """Reflection of ``y`` against ``obs``; the sentinel disables it."""
    on = obs > OBSTACLE_OFF * 0.5
    push = np.where(on, np.maximum(obs - y, 0.0), 0.0)
    return np.where(on & (obs > y), obs, y), push, on & (obs >= y)


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

def obstacle_array(lat: Lattice, obstacle=None) -> np.ndarray:
    """Obstacle per (layer, node); row n is ignored by the solvers."""
    n1, N = lat.n_steps + 1, lat.n_nodes
    if obstacle is None:
        t = lat.times.times
        return np.stack([obstacle_values(lat.spec, float(t[k]), lat.x) for k in range(n1)])
    if obstacle is False:
        return np.full((n1, N), OBSTACLE_OFF)
    if callable(obstacle):
        t = lat.times.times
        return np.stack([np.broadcast_to(np.asarray(obstacle(float(t[k]), lat.x), float), (N,))
                         for k in range(n1)])
    arr = np.asarray(obstacle, dtype=float)
    if arr.ndim == 0:
        return np.full((n1, N), float(arr))
    if arr.shape == (N,):
        return np.tile(arr, (n1, 1))
    if arr.shape != (n1, N):
        raise ValidationError(f"obstacle shape {arr.shape} != {(n1, N)}")
    return arr


def _terminal(lat: Lattice, terminal) -> np.ndarray:
    if terminal is None:
        return np.asarray(lat.spec.rewards.g(lat.x), dtype=float) * np.ones(lat.n_nodes)
    if callable(terminal):
        return np.asarray(terminal(lat.x), dtype=float) * np.ones(lat.n_nodes)
    arr = np.asarray(terminal, dtype=float)
    if arr.shape != (lat.n_nodes,):
        raise ValidationError(f"terminal shape {arr.shape} != {(lat.n_nodes,)}")
    return arr


def _check_contraction(lat: Lattice, driver) -> None:
    if driver.lipschitz_C * lat.dt >= 1:
        raise ConfigurationError(
            f"lipschitz_C * dt = {driver.lipschitz_C * lat.dt:.4g} must be < 1")


def backward(lat: Lattice, *, policy: Optional[Policy] = None, optimize: bool = False,
             obstacle=False, terminal=None, horizon: Optional[HorizonSpec] = None,
             driver=None) -> BackwardField:
    """Shared backward sweep behind every public solver."""
    driver = driver or lat.spec.driver
    _check_contraction(lat, driver)
    n, N, m = lat.n_steps, lat.n_nodes, lat.spec.marks.m
    if not optimize:
        policy = policy if policy is not None else Policy.constant(lat)
        policy.validate(lat)
    obs = obstacle_array(lat, obstacle)
    g = _terminal(lat, terminal)

    Y = np.empty((n + 1, N))
    Z = np.zeros((n + 1, N))
    K = np.zeros((n + 1, N, m))
    A = np.zeros((n + 1, N))
    choice = np.zeros((n + 1, N), dtype=int)
    stopped = np.zeros((n + 1, N), dtype=bool)
    refl = np.zeros((n + 1, N), dtype=bool)

    theta = horizon.theta if horizon is not None else None
    if theta is not None:
        theta.validate(lat)
        xi = horizon.xi
        Y[n] = xi[n]
        stopped[n] = True
    else:
        Y[n] = g
    delayed = theta is not None and theta.checkpoints is not None
    Yt = Y[n].copy() if delayed else None
    cps = set(theta.checkpoints) if delayed else set()

    def step(k, y_next):
        row = None if optimize else policy.choice[k]
        y, z, kk, ch = continuation(lat, k, y_next, driver, policy_row=row)
        yr, push, active = reflect(y, obs[k])
        return yr, z, kk, push, ch, active

    for k in range(n - 1, -1, -1):
        yr, z, kk, push, ch, active = step(k, Y[k + 1])
        if theta is None:
            Y[k], Z[k], K[k], A[k], choice[k], refl[k] = yr, z, kk, push, ch, active
            continue
        s = theta.stop[k]
        if delayed:
            ytr, ztr, ktr, ptr, chtr, acttr = step(k, Yt)
            Y[k] = np.where(s, ytr, yr)
            Z[k] = np.where(s, ztr, z)
            K[k] = np.where(s[:, None], ktr, kk)
            A[k] = np.where(s, ptr, push)
            choice[k] = np.where(s, chtr, ch)
            refl[k] = np.where(s, acttr, active)
            Yt = xi[k].copy() if k in cps else ytr
        else:
            Y[k] = np.where(s, xi[k], yr)
            Z[k] = np.where(s, 0.0, z)
            K[k] = np.where(s[:, None], 0.0, kk)
            A[k] = np.where(s, 0.0, push)
            choice[k] = ch
            refl[k] = ~s & active
            stopped[k] = s

    meta = {"dt": lat.dt, "dx": lat.dx, "picard_tol": PICARD_TOL, "picard_max": PICARD_MAX,
            "reflected": bool(np.any(obs[:n] > OBSTACLE_OFF * 0.5)),
            "optimized": optimize}
    if lat.spec.rewards.h is not None:
        h_T = obstacle_values(lat.spec, float(lat.times.T), lat.x)
        meta["continuous_push"] = bool(np.all(h_T <= g + 1e-12))
    return BackwardField(Y=Y, Z=Z, K=K, A_inc=A, times=lat.times.times, x=lat.x,
                         choice=choice, stopped=stopped, reflected=refl, meta=meta)


def solve_bsde(lat: Lattice, policy: Optional[Policy] = None, terminal=None,
               driver=None) -> BackwardField:
    """Plain BSDE with the control frozen by ``policy``."""
    return backward(lat, policy=policy, obstacle=False, terminal=terminal, driver=driver)


def solve_rbsde(lat: Lattice, policy: Optional[Policy] = None, obstacle=None, terminal=None,
                driver=None) -> BackwardField:
    """Reflected BSDE; ``obstacle=None`` means the problem's h (absent h disables it).

    The horizon layer is never reflected.
    """
    return backward(lat, policy=policy, obstacle=obstacle, terminal=terminal, driver=driver)


def solve_stopped_rbsde(lat: Lattice, policy: Optional[Policy], obstacle,
                        horizon: HorizonSpec, driver=None, optimize: bool = False) -> BackwardField:
    """Reflected BSDE stopped at ``horizon.theta`` with payoff ``horizon.xi``.

    On stopped nodes ``Y = xi`` and ``Z = K = 0``; the driver is switched off
    there.  ``optimize=True`` maximizes over controls instead of using a policy.
    """
    return backward(lat, policy=policy, optimize=optimize, obstacle=obstacle,
                    horizon=horizon, driver=driver)


def nonlinear_expectation(lat: Lattice, policy: Optional[Policy], horizon: HorizonSpec,
                          driver=None, x0: Optional[float] = None) -> float:
    """E^f_{0,theta}[xi] at the starting node: the unreflected stopped solve."""
    fld = backward(lat, policy=policy, obstacle=False, horizon=horizon, driver=driver)
    j0 = lat.x0_index if x0 is None else lat.index_of(x0)
    return float(fld.Y[0, j0])


# ---------------------------------------------------------------------------
# brute force over stopping rules
# ---------------------------------------------------------------------------

def children(lat: Lattice, q: int, j: int) -> set:
    """Next-layer nodes that the layer step reads from node ``j``."""
    out = set(lat.P[q].getrow(j).indices.tolist())
    out.update(lat.W[q].getrow(j).indices.tolist())
    for Jm in lat.J[q]:
        out.update(Jm.getrow(j).indices.tolist())
    out.add(j)
    return out


def snell_bruteforce(lat: Lattice, payoff=None, policy: Optional[Policy] = None, driver=None,
                     x0: Optional[float] = None, return_rule: bool = False):
    """Exhaustive maximum over Markov stopping rules of the stopped expectation.

    ``payoff[k, j]`` is the reward for stopping at node ``(k, j)``; row ``n`` is
    the terminal reward.  The default is h before the horizon and g at it.
    Entries at the obstacle sentinel cannot be stopped on.  Every assignment
    of stop/continue to the nodes reachable from ``x0`` is evaluated.
    """
    if lat.n_steps + 1 > SNELL_MAX_LAYERS or lat.n_nodes > SNELL_MAX_NODES:
        raise SchemeError(
            f"snell_bruteforce refuses lattices beyond {SNELL_MAX_LAYERS} layers x "
            f"{SNELL_MAX_NODES} nodes")
    driver = driver or lat.spec.driver
    _check_contraction(lat, driver)
    policy = policy if policy is not None else Policy.constant(lat)
    policy.validate(lat)
    n, N = lat.n_steps, lat.n_nodes
    if payoff is None:
        pay = obstacle_array(lat, None)
        pay[n] = _terminal(lat, None)
    else:
        pay = np.asarray(payoff, dtype=float)
        if pay.shape != (n + 1, N):
            raise ValidationError(f"payoff shape {pay.shape} != {(n + 1, N)}")
    j0 = lat.x0_index if x0 is None else lat.index_of(x0)

    reach = [{j0}]
    for k in range(n):
        nxt = set()
        for j in reach[k]:
            nxt |= children(lat, int(policy.choice[k, j]), j)
        reach.append(nxt)
    bits = [(k, j) for k in range(n) for j in sorted(reach[k])
            if pay[k, j] > OBSTACLE_OFF * 0.5]
    if len(bits) > SNELL_MAX_BITS:
        raise SchemeError(f"snell_bruteforce: {len(bits)} decision nodes exceeds "
                          f"{SNELL_MAX_BITS}")

    total = 1 << len(bits)
    best_val, best_code = -np.inf, 0
    for start in range(0, total, _CHUNK):
        codes = np.arange(start, min(total, start + _CHUNK), dtype=np.int64)
        R = codes.size
        stop = np.zeros((R, n + 1, N), dtype=bool)
        for b, (k, j) in enumerate(bits):
            stop[:, k, j] = (codes >> b) & 1
        Y = np.broadcast_to(pay[n], (R, N)).copy()
        for k in range(n - 1, -1, -1):
            y, _, _, _ = continuation(lat, k, Y, driver, policy_row=policy.choice[k])
            Y = np.where(stop[:, k, :], pay[k][None, :], y)
        vals = Y[:, j0]
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val, best_code = float(vals[i]), int(codes[i])
    if not return_rule:
        return best_val
    rule = np.zeros((n + 1, N), dtype=bool)
    rule[n] = True
    for b, (k, j) in enumerate(bits):
        rule[k, j] = bool((best_code >> b) & 1)
    return best_val, StoppingRule(rule)
