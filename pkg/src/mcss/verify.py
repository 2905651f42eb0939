"""Property suites for the structural results on discrete instances.

Almost-sure statements become statements over every lattice node; each
suite carries a dt-proportional slack where the continuous-time result is
exact, and each has a twin with an injected violation that must fail.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from typing import Optional
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .bsde import (HorizonSpec, Policy, StoppingRule, backward, obstacle_array, solve_bsde,
                   solve_rbsde)
from .control import dpp_check, random_instance, random_stopping_rule, solve_value
from .corpus import CASES, case_grids
from .errors import ValidationError
from .forward import Lattice, TimeGrid, build_lattice
from .model import Driver, builtin_registry

BLOCK = 4096


@dataclass
class TheoremReport:
    theorem: str
    seed: int
    margins: dict
    passed: bool
    counterexample: Optional[dict] = None
    expect_fail: bool = False
    details: dict = dc_field(default_factory=dict)

    @property
    def ok(self) -> bool:
        """Pass for a regular suite, fail for an injected-violation twin."""
        return self.passed != self.expect_fail

    def to_dict(self) -> dict:
        return {"theorem": self.theorem, "seed": self.seed, "pass": self.passed,
                "expect_fail": self.expect_fail, "ok": self.ok,
                "margins": _clean(self.margins), "counterexample": _clean(self.counterexample),
                "details": _clean(self.details)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _rng(seed: int, i: int = 0, tag: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag), int(i)]))


def shifted_driver(driver: Driver, bump) -> Driver:
    """driver.f + bump(a, t, x); gamma and constants unchanged."""
    f0 = driver.f

    def f(a, t, x, y, z, k):
        return f0(a, t, x, y, z, k) + bump(a, t, x)

    return replace(driver, f=f)


def _table_bump(lat: Lattice, table: np.ndarray):
    """Nonnegative (layer, node) table as a function of (a, t, x)."""
    times = lat.times.times

    def bump(a, t, x):
        k = int(np.argmin(np.abs(times - t)))
        return table[k]

    return bump


def _instance(seed: int, i: int, *, jumps=True, driver=True, controls=None):
    rng = _rng(seed, i, tag=1)
    L = int(rng.choice([4, 5, 6]))
    N = int(rng.choice([5, 7, 9]))
    q = int(controls if controls is not None else rng.integers(1, 3))
    lat = random_instance(int(rng.integers(2 ** 31)), L, N, q, jumps=jumps, driver=driver)
    return lat, rng


# ---------------------------------------------------------------------------
# comparison with shift
# ---------------------------------------------------------------------------

def _twin_gamma(seed: int, i: int):
    """Lattice whose jumps land away from the diffusion stencil, driver gamma = -2."""
    rng = _rng(seed, i, tag=2)
    n_nodes, n_steps = 9, 8
    dx = 0.25
    T = 1.0
    spec = builtin_registry("affine", {
        "b0": 0.0, "b1": 0.0, "s0": float(rng.uniform(0.1, 0.2)), "l0": 0.0, "l1": 0.0,
        "c_y": 0.0, "marks": [-3 * dx, 3 * dx], "weights": [1.0, 1.0], "c0": 1.0, "x_bound": 1.0, "T": T})
    lat = build_lattice(spec, -1.0, 1.0, n_nodes - 1, TimeGrid(0.0, T, n_steps))
    nu = spec.marks.nu
    gam = np.array([-2.0, -2.0])

    def f(a, t, x, y, z, k):
        return np.asarray(k, float) @ (gam * nu)

    drv = Driver(f=f, gamma=lambda *a: np.broadcast_to(gam, (2,)),
                 lipschitz_C=float(np.sqrt(np.sum(nu * gam ** 2))), growth_C=0.0, growth_p=1)
    return lat, drv


def test_comparison_shift(instances: int = 200, seed: int = 0, violate: bool = False,
                          epsilon: Optional[float] = None) -> TheoremReport:
    """Y1 >= Y2 + eps e^{-CT} - (1e-10 + 5 dt eps) at every node before theta.

    f1 = f2 + nonnegative bump, xi1 = xi2 + eps + nonnegative bump.  The
    twin uses gamma = -2 and bumps xi1 on the jump targets only.
    """
    worst = math.inf
    counter = None
    for i in range(instances):
        if violate:
            lat, drv2 = _twin_gamma(seed, i)
            rng = _rng(seed, i, tag=3)
        else:
            lat, rng = _instance(seed, i)
            drv2 = lat.spec.driver
        n, N = lat.n_steps, lat.n_nodes
        eps = float(rng.uniform(1e-3, 1.0)) if epsilon is None else float(epsilon)
        theta = random_stopping_rule(lat, rng, 0.2) if not violate else StoppingRule.at_horizon(lat)
        xi2 = rng.normal(size=(n + 1, N))
        if violate:
            targets = np.zeros((n + 1, N))
            j = lat.x0_index
            for Jm in lat.J[0]:
                targets[:, Jm.getrow(j).indices] = 10.0
            extra = targets
            f_bump = np.zeros((n + 1, N))
        else:
            extra = np.abs(rng.normal(size=(n + 1, N))) * rng.integers(0, 2, size=(n + 1, N))
            f_bump = np.abs(rng.normal(size=(n + 1, N))) * float(rng.integers(0, 2))
        xi1 = xi2 + eps + extra
        drv1 = shifted_driver(drv2, _table_bump(lat, f_bump))
        y1 = backward(lat, optimize=False, obstacle=False, horizon=HorizonSpec(theta, xi1),
                      driver=drv1).Y
        y2 = backward(lat, optimize=False, obstacle=False, horizon=HorizonSpec(theta, xi2),
                      driver=drv2).Y
        C = drv2.lipschitz_C
        T = lat.times.T - lat.times.t0
        tol = 1e-10 + 5 * lat.dt * eps
        margin = float(np.min(y1 - y2 - eps * math.exp(-C * T) + tol))
        if margin < worst:
            worst = margin
            if margin < 0:
                kk, jj = np.unravel_index(np.argmin(y1 - y2), y1.shape)
                counter = {"instance": i, "eps": eps, "C": C, "k": int(kk), "j": int(jj),
                           "y1": float(y1[kk, jj]), "y2": float(y2[kk, jj])}
    return TheoremReport("comparison_shift" + ("_twin" if violate else ""), seed,
                         {"min_margin": worst}, worst >= 0, counter, expect_fail=violate,
                         details={"instances": instances})


# ---------------------------------------------------------------------------
# BSDE versus reflected BSDE
# ---------------------------------------------------------------------------

def test_bsde_vs_rbsde(instances: int = 100, seed: int = 0, violate: bool = False,
                       epsilon: Optional[float] = None, sentinel: bool = False) -> TheoremReport:
    """X1 >= Y2 + eps e^{-CT} - tol where X1 is a plain BSDE and Y2 a reflected one.

    A pilot solve gives X1; the reflected problem's obstacle is X1 - eps
    lowered by a nonnegative bump, its terminal payoff and driver are
    lowered likewise.  The twin keeps the obstacle at X1 + eps.
    """
    worst = math.inf
    counter = None
    for i in range(instances):
        lat, rng = _instance(seed, i)
        n, N = lat.n_steps, lat.n_nodes
        eps = float(rng.uniform(0.0, 1.0)) if epsilon is None else float(epsilon)
        drv1 = lat.spec.driver
        pol = Policy(rng.integers(0, lat.n_controls, size=(n + 1, N)))
        g1 = rng.normal(size=N)
        x1 = solve_bsde(lat, pol, terminal=g1, driver=drv1).Y
        drop = np.abs(rng.normal(size=(n + 1, N))) * rng.integers(0, 2, size=(n + 1, N))
        if sentinel:
            obs = False
        elif violate:
            obs = x1 + max(eps, 0.1)
        else:
            obs = x1 - eps - drop
        g2 = g1 - eps - drop[n]
        f_drop = np.abs(rng.normal(size=(n + 1, N))) * float(rng.integers(0, 2))
        drv2 = shifted_driver(drv1, _table_bump(lat, -f_drop))
        y2 = solve_rbsde(lat, pol, obstacle=obs, terminal=g2, driver=drv2).Y
        C = drv1.lipschitz_C
        T = lat.times.T - lat.times.t0
        tol = 1e-10 + 5 * lat.dt * eps
        margin = float(np.min(x1 - y2 - eps * math.exp(-C * T) + tol))
        if margin < worst:
            worst = margin
            if margin < 0:
                kk, jj = np.unravel_index(np.argmin(x1 - y2), x1.shape)
                counter = {"instance": i, "eps": eps, "k": int(kk), "j": int(jj),
                           "x1": float(x1[kk, jj]), "y2": float(y2[kk, jj])}
    return TheoremReport("bsde_vs_rbsde" + ("_twin" if violate else ""), seed,
                         {"min_margin": worst}, worst >= 0, counter, expect_fail=violate,
                         details={"instances": instances, "sentinel": sentinel})


# ---------------------------------------------------------------------------
# dyadic stopping times, continuity and Fatou
# ---------------------------------------------------------------------------

def dyadic_stopping_times(theta: StoppingRule, n: int) -> StoppingRule:
    """Dyadic right-shift theta^n of a Markov rule.

    On {theta in [m T/2^n, (m+1) T/2^n)} the new rule stops at (m+1) T/2^n,
    and theta^n = T on {theta = T}.  The layer count must be divisible by 2^n.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if theta.checkpoints is not None:
        raise ValidationError("dyadic shift needs a Markov (undelayed) rule")
    layers = theta.stop.shape[0] - 1
    if layers % (2 ** n):
        raise ValidationError(f"{layers} time steps are not refinable to 2^{n} dyadic layers")
    step = layers // 2 ** n
    return StoppingRule(theta.stop, checkpoints=tuple(range(step, layers + 1, step)))


def _payoff_tables(lat: Lattice, rng, above: bool = True):
    """Obstacle h and a payoff phi >= h (or phi < h for the twin), both Lipschitz."""
    t = lat.times.times[:, None]
    x = lat.x[None, :]
    a1, a2, a3 = rng.uniform(-1, 1, 3)
    h = a1 * np.sin(2 * x) + a2 * x + 0.3 * a3 * t + 0 * t
    lift = 0.2 + 0.1 * np.cos(x + t) if above else -(0.5 + 0.1 * np.cos(x + t))
    phi = h + lift
    return h, phi


@dataclass
class _FatouData:
    lat: Lattice
    theta: StoppingRule
    h: np.ndarray
    phi: np.ndarray


def _continuity_instance(seed: int, n_max: int, above: bool):
    rng = _rng(seed, 0, tag=5)
    n_steps = 2 ** n_max
    spec = builtin_registry("affine", {
        "b0": float(rng.uniform(-0.2, 0.2)), "b1": 0.0, "s0": float(rng.uniform(0.2, 0.4)),
        "l0": float(rng.uniform(-0.5, 0.5)), "l1": float(rng.uniform(-0.5, 0.5)),
        "c_y": float(rng.uniform(-0.5, 0.5)), "c_z": float(rng.uniform(-0.2, 0.2)),
        "marks": [0.2], "weights": [1.0], "gamma": [float(rng.uniform(-0.5, 0.5))],
        "c0": 1.0, "x_bound": 2.0, "T": 1.0})
    lat = build_lattice(spec, -2.0, 2.0, 40, TimeGrid(0.0, 1.0, n_steps))
    center = float(lat.x[lat.x0_index])
    theta = StoppingRule.first_exit(lat, center, float(rng.uniform(0.3, 0.8)))
    # also stop on a random time band so theta is not only an exit time
    s = theta.stop.copy()
    s[int(rng.integers(n_steps // 2, n_steps)):, :] = True
    theta = StoppingRule(s)
    h, phi = _payoff_tables(lat, rng, above)
    return _FatouData(lat, theta, h, phi)


def _stopped_value(d: _FatouData, rule: StoppingRule, xi: np.ndarray) -> float:
    fld = backward(d.lat, optimize=False, obstacle=d.h, horizon=HorizonSpec(rule, xi))
    return float(fld.Y[0, d.lat.x0_index])


def test_continuity_fatou(instance: int = 0, n_max: int = 6, mode: str = "convergent",
                          check_condition: bool = True, violate: bool = False) -> TheoremReport:
    """Y_{0,theta^n}(xi^n) -> Y_{0,theta}(xi) and the Fatou one-sided bounds.

    ``mode`` selects xi^n: "constant" (xi^n = xi, theta^n = theta),
    "convergent" (xi^n = xi + 2^-n), "lipschitz" (xi^n = xi + 1/n, checked
    against the Lipschitz bound e^{CT}/n plus the pure theta^n gap) or
    "oscillating" (xi^n = xi + (-1)^n / 2).  The twin (``violate``) puts the
    obstacle above xi at theta and also stops at t0.
    """
    d = _continuity_instance(instance, n_max, above=not violate)
    if violate:
        s = d.theta.stop.copy()
        s[0] = True
        d.theta = StoppingRule(s)
    lat, theta = d.lat, d.theta
    n = lat.n_steps
    trig = theta.stop.copy()
    trig[n] = False
    if check_condition and np.any(d.h[trig] > d.phi[trig] + 1e-12):
        raise ValidationError("obstacle exceeds the payoff at theta (eta_theta <= xi violated)")
    dt = lat.dt
    C = lat.spec.driver.lipschitz_C
    base = _stopped_value(d, theta, d.phi)
    shift = {"constant": lambda k: 0.0, "convergent": lambda k: 2.0 ** -k,
             "lipschitz": lambda k: 1.0 / k, "oscillating": lambda k: 0.5 * (-1) ** k}[mode]
    values, gaps, bounds = [], [], []
    for k in range(1, n_max + 1):
        rule = theta if mode == "constant" else dyadic_stopping_times(theta, k)
        v = _stopped_value(d, rule, d.phi + shift(k))
        values.append(v)
        gaps.append(abs(v - base))
        if mode == "lipschitz":
            pure = abs(_stopped_value(d, rule, d.phi) - base)
            bounds.append(math.exp(C * lat.times.T) / k + pure + 1e-10)
    margins = {"gaps": gaps, "tol": 10 * dt}
    passed = True
    if mode == "lipschitz":
        margins["lipschitz_margin"] = min(b - g for b, g in zip(bounds, gaps))
        passed = margins["lipschitz_margin"] >= 0
    elif mode in ("constant", "convergent"):
        nonincr = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
        margins["final_gap"] = gaps[-1]
        margins["nonincreasing"] = nonincr
        passed = gaps[-1] < 10 * dt and nonincr
        if mode == "constant":
            passed = passed and max(gaps) == 0.0
    else:
        tol = 10 * dt
        liminf_v = min(values[-2:])
        limsup_v = max(values[-2:])
        lo = _stopped_value(d, theta, d.phi - 0.5)
        hi = _stopped_value(d, theta, d.phi + 0.5)
        margins.update(liminf_margin=liminf_v + tol - lo, limsup_margin=hi + tol - limsup_v,
                       liminf=liminf_v, limsup=limsup_v, y_liminf_xi=lo, y_limsup_xi=hi)
        passed = margins["liminf_margin"] > 0 and margins["limsup_margin"] > 0
    counter = None if passed else {"values": values, "base": base}
    return TheoremReport(f"continuity_fatou_{mode}" + ("_twin" if violate else ""), instance,
                         margins, passed, counter, expect_fail=violate,
                         details={"n_max": n_max, "dt": dt})


# ---------------------------------------------------------------------------
# stability estimate
# ---------------------------------------------------------------------------

def sample_chain(lat: Lattice, policy: Policy, n_paths: int, seed: int, threads: int = 1):
    """Node paths of the chain, shape (n_paths, n_steps + 1).

    Fixed-size blocks with spawned seeds keep the draw independent of the
    thread count.
    """
    n = lat.n_steps
    cums = np.stack([np.cumsum(P.toarray(), axis=1) for P in lat.P])
    n_blocks = -(-n_paths // BLOCK)
    seqs = np.random.SeedSequence(seed).spawn(n_blocks)

    def block(b):
        size = min(BLOCK, n_paths - b * BLOCK)
        rng = np.random.default_rng(seqs[b])
        out = np.empty((size, n + 1), dtype=int)
        out[:, 0] = lat.x0_index
        for k in range(n):
            u = rng.random(size)
            cur = out[:, k]
            q = policy.choice[k, cur]
            cum = cums[q, cur]
            out[:, k + 1] = np.minimum((u[:, None] >= cum).sum(axis=1), lat.n_nodes - 1)
        return out

    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        parts = list(ex.map(block, range(n_blocks)))
    return np.concatenate(parts, axis=0)


def _stability_ratio(lat, pol, paths, base, pert, delta):
    g, h, f_tab = base
    dg, dh, df = pert
    y1 = solve_rbsde(lat, pol, obstacle=h, terminal=g).Y
    drv = shifted_driver(lat.spec.driver, _table_bump(lat, delta * df))
    y2 = solve_rbsde(lat, pol, obstacle=h + delta * dh, terminal=g + delta * dg, driver=drv).Y
    ks = np.arange(lat.n_steps + 1)
    ybar = (y1 - y2)[ks[None, :], paths]
    num = float(np.mean(np.max(ybar ** 2, axis=1)))
    xi_bar = float(np.mean((delta * dg[paths[:, -1]]) ** 2))
    f_bar = float(np.mean(np.sum((delta * df[ks[None, :-1], paths[:, :-1]]) ** 2, axis=1)) * lat.dt)
    eta_bar = math.sqrt(float(np.mean(np.max((delta * dh[ks[None, :-1], paths[:, :-1]]) ** 2,
                                             axis=1))))
    den = xi_bar + f_bar + eta_bar
    return num, den, float(np.max(np.abs(y1 - y2)))


def test_stability_estimate(instances: int = 100, seed: int = 0, delta: float = 0.1,
                            n_paths: int = 2000, threads: int = 1) -> TheoremReport:
    """Ratio ||Ybar||^2_S2 / (E xi_bar^2 + E int f_bar^2 + ||sup |eta_bar| ||) under delta -> delta/2.

    One base instance fixes (C, T); each of ``instances`` draws a perturbation
    direction of (xi, f, eta).  Pass iff the max ratio drifts up by at most 10%.
    """
    rng = _rng(seed, 0, tag=7)
    lat = random_instance(int(rng.integers(2 ** 31)), 6, 9, 2, T=1.0)
    n, N = lat.n_steps, lat.n_nodes
    pol = Policy(rng.integers(0, lat.n_controls, size=(n + 1, N)))
    paths = sample_chain(lat, pol, n_paths, int(rng.integers(2 ** 31)), threads=threads)
    base = (rng.normal(size=N), obstacle_array(lat, None), None)
    ratios = {delta: [], delta / 2: []}
    for i in range(instances):
        r2 = _rng(seed, i, tag=8)
        pert = (r2.uniform(-1, 1, N), r2.uniform(-1, 1, (n + 1, N)), r2.uniform(-1, 1, (n + 1, N)))
        for d in ratios:
            num, den, _ = _stability_ratio(lat, pol, paths, base, pert, d)
            ratios[d].append(num / den if den > 0 else 0.0)
    r_full = max(ratios[delta])
    r_half = max(ratios[delta / 2])
    drift = r_half / r_full - 1.0 if r_full > 0 else 0.0
    return TheoremReport("stability_estimate", seed,
                         {"max_ratio": r_full, "max_ratio_half": r_half, "drift": drift},
                         drift <= 0.10, None if drift <= 0.10 else {"ratios": [r_full, r_half]},
                         details={"instances": instances, "delta": delta, "n_paths": n_paths,
                                  "C": lat.spec.driver.lipschitz_C, "T": lat.times.T})


# ---------------------------------------------------------------------------
# flow property
# ---------------------------------------------------------------------------

def flow_gap(lat: Lattice, k_star: int, optimize: bool = True,
             policy: Optional[Policy] = None) -> float:
    """Max gap between the direct solve and the solve composed at layer k_star."""
    full = backward(lat, optimize=optimize, policy=policy, obstacle=None).Y
    n = lat.n_steps
    if k_star >= n:
        # the tail is the terminal layer itself
        composed = backward(lat, optimize=optimize, policy=policy, obstacle=None,
                            terminal=full[n]).Y
    else:
        tail_lat = lat.restrict(k_star, n)
        tpol = None if policy is None else Policy(policy.choice[k_star:])
        tail = backward(tail_lat, optimize=optimize, policy=tpol, obstacle=None).Y
        if k_star == 0:
            composed = tail
        else:
            head_lat = lat.restrict(0, k_star)
            hpol = None if policy is None else Policy(policy.choice[:k_star + 1])
            head = backward(head_lat, optimize=optimize, policy=hpol, obstacle=None,
                            terminal=tail[0]).Y
            composed = np.vstack([head[:-1], tail])
    return float(np.max(np.abs(composed - full)))


def test_flow_property(instances: int = 100, seed: int = 0) -> TheoremReport:
    worst, counter = 0.0, None
    for i in range(instances):
        lat, rng = _instance(seed, i)
        k_star = int(rng.integers(0, lat.n_steps + 1))
        pol = None
        if rng.random() < 0.5:
            pol = Policy(rng.integers(0, lat.n_controls, size=(lat.n_steps + 1, lat.n_nodes)))
        gap = flow_gap(lat, k_star, optimize=pol is None, policy=pol)
        if gap > worst:
            worst = gap
            counter = {"instance": i, "k_star": k_star, "gap": gap}
    return TheoremReport("flow_property", seed, {"max_gap": worst, "tol": 1e-12},
                         worst <= 1e-12, counter if worst > 1e-12 else None,
                         details={"instances": instances})


def test_dpp(instances: int = 5, rules: int = 10, seed: int = 0) -> TheoremReport:
    """Weak DPP in equality form for random grid stopping rules."""
    worst, counter = 0.0, None
    for i in range(instances):
        lat, rng = _instance(seed, i)
        u = solve_value(lat)
        for _ in range(rules):
            rep = dpp_check(lat, random_stopping_rule(lat, rng), surface=u)
            gap = max(abs(rep.sub_gap), abs(rep.super_gap))
            if gap > worst:
                worst, counter = gap, rep.to_dict()
    return TheoremReport("weak_dpp", seed, {"max_gap": worst, "tol": 1e-10}, worst <= 1e-10,
                         counter if worst > 1e-10 else None,
                         details={"instances": instances, "rules": rules})


def test_family_flow(name: str, seed: int = 0) -> TheoremReport:
    """Flow property on a coarse grid of a builtin family."""
    c = CASES[name]
    spec, lat, _ = case_grids(name, n_steps=c["n_steps"] // 2 * 2)
    rng = _rng(seed, 0, tag=9)
    k_star = int(rng.integers(1, lat.n_steps))
    gap = flow_gap(lat, k_star)
    return TheoremReport(f"flow_property[{name}]", seed, {"max_gap": gap, "tol": 1e-12},
                         gap <= 1e-12, None if gap <= 1e-12 else {"k_star": k_star},
                         details={"k_star": k_star})


# ---------------------------------------------------------------------------
# corpus runner and output
# ---------------------------------------------------------------------------

def seed_suites(seed: int):
    """Callables making up the default corpus for one seed."""
    return [
        lambda: test_comparison_shift(10, seed),
        lambda: test_comparison_shift(3, seed, violate=True),
        lambda: test_bsde_vs_rbsde(10, seed),
        lambda: test_bsde_vs_rbsde(3, seed, violate=True),
        lambda: test_continuity_fatou(seed, 5, "constant"),
        lambda: test_continuity_fatou(seed, 5, "convergent"),
        lambda: test_continuity_fatou(seed, 5, "lipschitz"),
        lambda: test_continuity_fatou(seed, 5, "oscillating"),
        lambda: test_continuity_fatou(seed, 5, "convergent", check_condition=False, violate=True),
        lambda: test_stability_estimate(10, seed, n_paths=1000),
        lambda: test_flow_property(10, seed),
        lambda: test_dpp(2, 5, seed),
    ] + [(lambda nm=nm: test_family_flow(nm, seed)) for nm in CASES]


def run_corpus(seeds, threads: int = 1) -> list:
    """All suites over ``seeds`` in a fixed order, independent of ``threads``."""
    tasks = [fn for s in seeds for fn in seed_suites(int(s))]
    if threads <= 1:
        return [fn() for fn in tasks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda fn: fn(), tasks))


def to_junit(reports: list, name: str = "mcss.verify") -> str:
    fails = sum(not r.ok for r in reports)
    lines = ['<?xml version="1.0" encoding="UTF-8"?>',
             f'<testsuite name={quoteattr(name)} tests="{len(reports)}" failures="{fails}">']
    for r in reports:
        case = f"{r.theorem}[seed={r.seed}]"
        lines.append(f'  <testcase classname={quoteattr(name)} name={quoteattr(case)}>')
        if not r.ok:
            msg = "expected failure did not occur" if r.expect_fail else "property violated"
            body = escape(json.dumps(_clean(r.margins), sort_keys=True))
            lines.append(f'    <failure message={quoteattr(msg)}>{body}</failure>')
        lines.append("  </testcase>")
    lines.append("</testsuite>")
    return "\n".join(lines) + "\n"


def write_reports(reports: list, out_dir) -> list:
    """JUnit summary plus one JSON file per theorem; returns written paths."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "junit.xml"]
    paths[0].write_text(to_junit(reports))
    by = {}
    for r in reports:
        by.setdefault(r.theorem, []).append(r.to_dict())
    for th, items in sorted(by.items()):
        p = out / (th.replace("[", "_").replace("]", "") + ".json")
        p.write_text(json.dumps(items, indent=2, sort_keys=True) + "\n")
        paths.append(p)
    return paths
