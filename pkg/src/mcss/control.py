"""Value function of the mixed control/stopping problem on the lattice.

``solve_value`` maximizes over the control grid inside every layer, with
the obstacle applied after the control max.  ``bruteforce_value`` is the
reference: it enumerates path-dependent strategies on tiny lattices, which
is what certifies that Markov policies lose nothing on the chain.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .bsde import (BackwardField, HorizonSpec, Policy, StoppingRule, backward, children,
                   continuation, obstacle_array, solve_rbsde, solve_stopped_rbsde)
from .errors import SchemeError, ValidationError
from .forward import Lattice, TimeGrid, build_lattice
from .model import OBSTACLE_OFF, builtin_registry

BRUTE_MAX_LAYERS = 4
BRUTE_MAX_NODES = 5
BRUTE_MAX_CONTROLS = 3
BRUTE_MAX_EVALS = 5_000_000
DPP_TOL = 1e-10


@dataclass(frozen=True)
class ValueSurface:
    u: np.ndarray
    policy: Policy
    stop_region: np.ndarray
    times: np.ndarray
    x: np.ndarray
    controls: np.ndarray
    field: Optional[BackwardField] = None
    meta: dict = dc_field(default_factory=dict)

    def value_at(self, x0: float, k: int = 0) -> float:
        j = int(np.argmin(np.abs(self.x - x0)))
        if abs(self.x[j] - x0) > 1e-9 * max(1.0, abs(x0)):
            raise ValidationError(f"x0={x0} is not a grid node")
        return float(self.u[k, j])

    def to_csv(self, path, branch: Optional[np.ndarray] = None) -> None:
        """Columns t, x, u, control, stop (plus the active min branch if given)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "u", "control", "stop"] + (["branch"] if branch is not None else []))
            a = self.controls[self.policy.choice]
            for k, t in enumerate(self.times):
                for j, xv in enumerate(self.x):
                    row = [f"{t:.17g}", f"{xv:.17g}", f"{self.u[k, j]:.17g}", f"{a[k, j]:.17g}",
                           int(self.stop_region[k, j])]
                    if branch is not None:
                        row.append(str(branch[k, j]))
                    w.writerow(row)


def _surface(lat: Lattice, fld: BackwardField, obs: np.ndarray, **meta) -> ValueSurface:
    n = lat.n_steps
    stop = np.zeros_like(fld.Y, dtype=bool)
    on = obs[:n] > OBSTACLE_OFF * 0.5
    stop[:n] = on & (fld.Y[:n] <= obs[:n])
    stop[n] = True
    return ValueSurface(u=fld.Y, policy=Policy(fld.choice.astype(int)), stop_region=stop,
                        times=fld.times, x=fld.x, controls=lat.spec.controls.array,
                        field=fld, meta=dict(fld.meta, **meta))


def solve_u_alpha(lat: Lattice, policy: Policy, driver=None) -> ValueSurface:
    """u^alpha: reflected solve against bar h with the control frozen."""
    fld = solve_rbsde(lat, policy=policy, obstacle=None, driver=driver)
    return _surface(lat, fld, obstacle_array(lat, None), route="chain", policy="fixed")


def solve_value(lat: Lattice, driver=None, obstacle=None, terminal=None) -> ValueSurface:
    """u: pointwise control maximization inside each layer, then reflection on bar h."""
    fld = backward(lat, optimize=True, obstacle=obstacle, terminal=terminal, driver=driver)
    return _surface(lat, fld, obstacle_array(lat, obstacle), route="chain", policy="argmax")


def bruteforce_value(lat: Lattice, driver=None, x0: Optional[float] = None,
                     obstacle=None, terminal=None) -> float:
    """Literal sup over path-dependent controls and stopping rules.

    From a tree node at ``(k, j)`` each strategy either stops, collecting the
    obstacle, or picks a control and then an independent continuation
    strategy for every distinct child node.  The achievable values from
    ``(k, j)`` therefore form the set ``{h} U (union over a of Phi_a(product
    of child sets))``; it depends on the history only through ``(k, j)``.
    Sets are enumerated in full, duplicates merged, and the max of the root
    set is returned.
    """
    n, N, nq = lat.n_steps, lat.n_nodes, lat.n_controls
    if n + 1 > BRUTE_MAX_LAYERS or N > BRUTE_MAX_NODES or nq > BRUTE_MAX_CONTROLS:
        raise SchemeError(
            f"bruteforce_value refuses lattices beyond {BRUTE_MAX_LAYERS} layers, "
            f"{BRUTE_MAX_NODES} nodes, {BRUTE_MAX_CONTROLS} controls")
    from .bsde import _check_contraction, _terminal
    driver = driver or lat.spec.driver
    _check_contraction(lat, driver)
    obs = obstacle_array(lat, obstacle)
    g = _terminal(lat, terminal)
    j0 = lat.x0_index if x0 is None else lat.index_of(x0)
    bound = strategy_bound(lat, j0, obs)
    if bound > BRUTE_MAX_EVALS:
        raise SchemeError(f"bruteforce_value: up to {bound:.3g} strategy evaluations exceeds "
                          f"the size guard {BRUTE_MAX_EVALS:.0e}")
    memo = {}

    def values(k, j):
        if k == n:
            return np.array([g[j]])
        if (k, j) in memo:
            return memo[(k, j)]
        opts = []
        if obs[k, j] > OBSTACLE_OFF * 0.5:
            opts.append(np.array([obs[k, j]]))
        for q in range(nq):
            ch = sorted(children(lat, q, j))
            sets = [values(k + 1, c) for c in ch]
            count = math.prod(len(s) for s in sets)
            grids = np.meshgrid(*sets, indexing="ij")
            Y = np.zeros((count, N))
            for c, gr in zip(ch, grids):
                Y[:, c] = gr.ravel()
            y, _, _, _ = continuation(lat, k, Y, driver, policy_row=np.full(N, q))
            opts.append(y[:, j])
        out = np.unique(np.concatenate(opts))
        memo[(k, j)] = out
        return out

    return float(values(0, j0).max())


def strategy_bound(lat: Lattice, j0: Optional[int] = None, obs=None) -> int:
    """Upper bound on the evaluations bruteforce_value performs (no merging)."""
    n, nq = lat.n_steps, lat.n_controls
    obs = obstacle_array(lat, None) if obs is None else obs
    j0 = lat.x0_index if j0 is None else j0
    size, work = {}, {}

    def visit(k, j):
        if k == n:
            return 1, 0
        if (k, j) not in size:
            tot, w = int(obs[k, j] > OBSTACLE_OFF * 0.5), 0
            seen = set()
            for q in range(nq):
                ch = sorted(children(lat, q, j))
                prod = 1
                for c in ch:
                    sc, wc = visit(k + 1, c)
                    prod *= sc
                    if (k + 1, c) not in seen:
                        seen.add((k + 1, c))
                        w += wc
                tot += prod
                w += prod
            size[(k, j)], work[(k, j)] = tot, w
        return size[(k, j)], work[(k, j)]

    return visit(0, j0)[1]


# ---------------------------------------------------------------------------
# dynamic programming check
# ---------------------------------------------------------------------------

@dataclass
class DppReport:
    theta: str
    u0: float
    rhs: float
    sub_gap: float
    super_gap: float
    tol: float = DPP_TOL

    @property
    def passed(self) -> bool:
        return abs(self.sub_gap) <= self.tol and abs(self.super_gap) <= self.tol

    def to_dict(self) -> dict:
        return {"theta": self.theta, "u0": self.u0, "rhs": self.rhs, "sub_gap": self.sub_gap,
                "super_gap": self.super_gap, "tol": self.tol, "pass": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def describe_rule(theta: StoppingRule) -> str:
    s = theta.stop
    n = s.shape[0] - 1
    if s[:n].all():
        base = "immediate"
    elif not s[:n].any():
        base = "horizon"
    else:
        base = f"markov({int(s[:n].sum())} stop nodes)"
    if theta.checkpoints is not None:
        base += f" delayed to {len(theta.checkpoints)} checkpoints"
    return base


def dpp_check(lat: Lattice, theta: StoppingRule, surface: Optional[ValueSurface] = None,
              x0: Optional[float] = None, driver=None) -> DppReport:
    """Compare u(t0, x0) with the control/stopping problem stopped at theta.

    The stopped problem pays h before theta and the value surface itself on
    and after theta; both DPP inequalities hold with equality on the chain.
    """
    if not isinstance(theta, StoppingRule):
        raise ValidationError("theta must be a StoppingRule")
    theta.validate(lat)
    if surface is None:
        surface = solve_value(lat, driver=driver)
    if surface.u.shape != (lat.n_steps + 1, lat.n_nodes):
        raise ValidationError("value surface does not match the lattice")
    fld = solve_stopped_rbsde(lat, None, None, HorizonSpec(theta, surface.u), driver=driver,
                              optimize=True)
    j0 = lat.x0_index if x0 is None else lat.index_of(x0)
    u0 = float(surface.u[0, j0])
    rhs = float(fld.Y[0, j0])
    return DppReport(theta=describe_rule(theta), u0=u0, rhs=rhs, sub_gap=rhs - u0,
                     super_gap=u0 - rhs)


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------

_SHAPES = ("put", "call", "affine", "clipped-quadratic")


def random_shape(rng: np.random.Generator, shapes=_SHAPES) -> dict:
    kind = shapes[int(rng.integers(len(shapes)))]
    if kind in ("put", "call"):
        return {"shape": kind, "strike": float(rng.uniform(-0.5, 0.5))}
    if kind == "affine":
        return {"shape": "affine", "c0": float(rng.uniform(-0.5, 0.5)),
                "c1": float(rng.uniform(-1, 1))}
    return {"shape": "clipped-quadratic", "center": float(rng.uniform(-0.5, 0.5)),
            "cap": float(rng.uniform(0.2, 1.0)), "scale": float(rng.uniform(-1, 1))}


def linear_step_matrix(lat: Lattice, q: int, c_z: float, gamma_nu) -> np.ndarray:
    """Coefficients of y_{k+1} in the explicit part of an affine-driver step."""
    M = (lat.P[q] + c_z * lat.W[q]).toarray()
    eye = np.eye(lat.n_nodes)
    for Jm, gn in zip(lat.J[q], gamma_nu):
        M += lat.dt * gn * (Jm.toarray() - eye)
    return M


def random_instance(seed: int, n_layers: int = 4, n_nodes: int = 5, n_controls: int = 2, *,
                    jumps: bool = True, driver: bool = True, obstacle: bool = True,
                    monotone: bool = True, box: float = 1.0,
                    T: Optional[float] = None) -> Lattice:
    """A small seeded lattice from the affine family with random data.

    Coefficients are scaled into the lattice CFL region.  With ``monotone``
    the z-coefficient is shrunk until every explicit step coefficient is
    nonnegative, which the comparison and brute-force identities rely on.
    """
    rng = np.random.default_rng(seed)
    n_steps = n_layers - 1
    dx = 2 * box / (n_nodes - 1)
    T_draw = float(rng.uniform(0.5, 1.0))
    T = T_draw if T is None else float(T)
    dt = T / n_steps
    controls = sorted(set(np.round(rng.uniform(-1, 1, n_controls), 6).tolist()))
    while len(controls) < n_controls:
        controls = sorted(set(controls) | {round(float(rng.uniform(-1, 1)), 6)})
    A = max(abs(c) for c in controls)
    s_cap = math.sqrt(0.3 * dx * dx / dt)
    s0 = float(rng.uniform(0.3, 0.7)) * s_cap
    s2 = float(rng.uniform(0, 0.3)) * s_cap / max(A, 1e-9)
    b_cap = 0.15 * dx / dt
    b0, b1, b2 = (float(v) for v in rng.uniform(-1, 1, 3) * b_cap / np.array([1, box, A + 1e-9]) / 3)
    p = {"b0": b0, "b1": b1, "b2": b2, "s0": s0, "s2": s2, "controls": controls, "T": T,
         "x_bound": box}
    if jumps:
        m = int(rng.integers(1, 3))
        p["marks"] = [float(v) for v in rng.uniform(-1.5, 1.5, m) * dx]
        p["weights"] = [float(v) for v in rng.uniform(0.05, 0.2, m) / dt / m]
        p["gamma"] = [float(v) for v in rng.uniform(-1, 1, m)] if driver else [0.0] * m
        p["c0"] = 1.0
        p["c2"] = float(rng.uniform(-0.3, 0.3))
    if driver:
        lip = 0.5 / dt
        p.update(l0=float(rng.uniform(-1, 1)), l1=float(rng.uniform(-1, 1)),
                 l2=float(rng.uniform(-1, 1)), l3=float(rng.uniform(-0.5, 0.5)),
                 c_y=float(rng.uniform(-1, 1)) * min(1.0, lip),
                 c_z=float(rng.uniform(-1, 1)))
    p["h"] = random_shape(rng) if obstacle else None
    p["g"] = random_shape(rng)
    spec = builtin_registry("affine", {"b0": 0.0, "b1": 0.0, "s0": 0.0, "l0": 0.0, "l1": 0.0,
                                       "c_y": 0.0, **p})
    lat = build_lattice(spec, -box, box, n_nodes - 1, TimeGrid(0.0, T, n_steps))
    if driver and monotone:
        c_z = p["c_z"]
        gnu = np.asarray(p.get("gamma", [])) * np.asarray(p.get("weights", []))
        for _ in range(60):
            if all(linear_step_matrix(lat, q, c_z, gnu).min() >= -1e-15
                   for q in range(lat.n_controls)):
                break
            c_z *= 0.5
        else:
            c_z = 0.0
        if c_z != p["c_z"]:
            p["c_z"] = c_z
            spec = builtin_registry("affine", {"b0": 0.0, "b1": 0.0, "s0": 0.0, "l0": 0.0,
                                               "l1": 0.0, "c_y": 0.0, **p})
            lat = build_lattice(spec, -box, box, n_nodes - 1, TimeGrid(0.0, T, n_steps))
    return lat


def random_policy(lat: Lattice, rng: np.random.Generator) -> Policy:
    return Policy(rng.integers(0, lat.n_controls, size=(lat.n_steps + 1, lat.n_nodes)))


def random_stopping_rule(lat: Lattice, rng: np.random.Generator, p: float = 0.3) -> StoppingRule:
    s = rng.random((lat.n_steps + 1, lat.n_nodes)) < p
    s[-1] = True
    return StoppingRule(s)
