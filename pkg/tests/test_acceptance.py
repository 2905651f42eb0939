"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the session.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mcss import verify
from mcss.bsde import snell_bruteforce, solve_rbsde
from mcss.control import (BRUTE_MAX_EVALS, bruteforce_value, dpp_check, random_instance,
                          random_stopping_rule, solve_value, strategy_bound)
from mcss.corpus import CASES, case_grids, exact_value
from mcss.pide import (american_put_binomial, cross_validate, interior_mask, solve_hjbvi,
                       viscosity_residual)


def record(n, title, ok, detail, elapsed, budget=None):
    over = budget is not None and elapsed >= budget
    status = "PASS" if ok and not over else "FAIL"
    limit = f" (budget {budget:g} s)" if budget is not None else ""
    ACCEPTANCE_LINES[n] = f"[{n:2d}] {status} {title}: {detail}; {elapsed:.1f} s{limit}"
    print(ACCEPTANCE_LINES[n])
    assert ok, detail
    assert not over, f"runtime {elapsed:.1f} s exceeds {budget} s"


def test_01_snell_exactness():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for s in range(50):
        rng = np.random.default_rng(s)
        L, N = int(rng.integers(2, 6)), int(rng.integers(4, 10))
        lat = random_instance(s, L, N, 1, driver=False, jumps=bool(s % 2))
        pay = rng.normal(size=(L, N))
        brute = snell_bruteforce(lat, payoff=pay)
        refl = solve_rbsde(lat, obstacle=pay, terminal=pay[-1]).Y[0, lat.x0_index]
        worst = max(worst, abs(brute - refl))
        count += 1
    record(1, "Snell exactness", count == 50 and worst <= 1e-12,
           f"{count} instances, max |rbsde - brute| = {worst:.2e} (tol 1e-12)",
           time.perf_counter() - t0, 5)


ENUM_SHAPES = [(3, 5, 3, True), (3, 5, 2, True), (4, 5, 2, False), (4, 4, 3, False),
               (4, 5, 3, False), (4, 5, 2, True)]


def test_02_double_supremum_exactness():
    t0 = time.perf_counter()
    worst, count, skipped = 0.0, 0, 0
    for s in range(10):
        for L, N, q, jumps in ENUM_SHAPES:
            lat = random_instance(s, L, N, q, jumps=jumps)
            if strategy_bound(lat) > BRUTE_MAX_EVALS:
                skipped += 1
                continue
            gap = abs(bruteforce_value(lat) - solve_value(lat).u[0, lat.x0_index])
            worst = max(worst, gap)
            count += 1
    record(2, "double-supremum exactness", count > 0 and worst <= 1e-12,
           f"{count} enumerable instances ({skipped} over the size guard), "
           f"max gap {worst:.2e} (tol 1e-12)", time.perf_counter() - t0, 30)


def test_03_weak_dpp():
    t0 = time.perf_counter()
    worst, checks = 0.0, 0
    for s in range(20):
        lat = random_instance(s, 5, 9, 3)
        rng = np.random.default_rng(s)
        surf = solve_value(lat)
        for _ in range(10):
            rep = dpp_check(lat, random_stopping_rule(lat, rng), surface=surf)
            worst = max(worst, abs(rep.sub_gap), abs(rep.super_gap))
            checks += 1
    record(3, "weak DPP", checks == 200 and worst <= 1e-10,
           f"{checks} rules, max gap {worst:.2e} (tol 1e-10)", time.perf_counter() - t0, 60)


def test_04_comparison_shift():
    t0 = time.perf_counter()
    rep = verify.test_comparison_shift(200, seed=0)
    twin = verify.test_comparison_shift(3, seed=0, violate=True)
    record(4, "comparison with shift", rep.passed and not twin.passed,
           f"200 instances, min margin {rep.margins['min_margin']:.3g}; "
           f"gamma=-2 twin {'fails' if not twin.passed else 'PASSES'}",
           time.perf_counter() - t0, 30)


def test_05_bsde_rbsde_continuity_fatou():
    t0 = time.perf_counter()
    regular = [verify.test_bsde_vs_rbsde(100, seed=0)]
    twins = [verify.test_bsde_vs_rbsde(3, seed=0, violate=True)]
    for inst in range(5):
        for mode in ("constant", "convergent", "lipschitz", "oscillating"):
            regular.append(verify.test_continuity_fatou(inst, 6, mode))
        twins.append(verify.test_continuity_fatou(inst, 6, "convergent", check_condition=False,
                                                  violate=True))
    bad = [r.theorem for r in regular if not r.passed] + [r.theorem for r in twins if r.passed]
    const = [r for r in regular if r.theorem.endswith("constant")]
    record(5, "BSDE-vs-RBSDE and continuity/Fatou", not bad,
           f"{len(regular)} suites pass, {len(twins)} twins fail, "
           f"{len(const)} constant-sequence cases within tolerance" if not bad else f"offending: {bad}",
           time.perf_counter() - t0, 60)


def test_06_pide_closed_form():
    t0 = time.perf_counter()
    spec, lat, sch = case_grids("linear-pide", n_steps=400, n_space=200)
    exact = exact_value("linear-pide")
    u_chain = solve_value(lat).u[0, lat.x0_index]
    u_pide = solve_hjbvi(spec, sch).u[0, lat.x0_index]
    rel = max(abs(u_chain - exact), abs(u_pide - exact)) / abs(exact)
    rep = cross_validate(spec, lat, sch, refine=3, exact=exact)
    orders = rep.orders("err_exact")
    ok = rel <= 0.01 and all(0.8 <= p <= 1.2 for p in orders)
    record(6, "PIDE closed form", ok,
           f"rel err {rel:.2e} at 400x200 (tol 1e-2), orders {[round(p, 3) for p in orders]}",
           time.perf_counter() - t0, 60)


def test_07_american_put():
    t0 = time.perf_counter()
    spec, lat, sch = case_grids("american-put", n_steps=200, n_space=120)
    ref = american_put_binomial(1.0, 1.0, 0.05, 0.2, 1.0, steps=200)
    chain = solve_value(lat).u[0, lat.x0_index]
    pide = solve_hjbvi(spec, sch).u[0, lat.x0_index]
    rel = [abs(chain - ref) / ref, abs(pide - ref) / ref]
    record(7, "American put cross-oracle", max(rel) <= 0.02,
           f"CRR {ref:.6f}, chain {chain:.6f}, HJBVI {pide:.6f}, max rel {max(rel):.2e} "
           f"(tol 2e-2)", time.perf_counter() - t0, 60)


def test_08_cross_validation():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in CASES:
        spec, lat, sch = case_grids(name)
        rep = cross_validate(spec, lat, sch, refine=3)
        ok &= rep.passed
        parts.append(f"{name} {rep.errors[-1]:.1e}<={rep.tol:.2g}"
                     f"{'' if rep.monotone else ' NON-MONOTONE'}")
    record(8, "cross-validation", ok, "; ".join(parts), time.perf_counter() - t0, 300)


def test_09_viscosity_residual():
    t0 = time.perf_counter()
    grids = [(name, None, None) for name in CASES] + [("american-put", 200, 120)]
    parts, ok = [], True
    for name, n_steps, n_space in grids:
        spec, lat, sch = case_grids(name, n_steps=n_steps, n_space=n_space)
        surf = solve_hjbvi(spec, sch)
        rep = viscosity_residual(surf, spec, sch)
        k = sch.times.n_steps // 3
        j = int(np.flatnonzero(interior_mask(sch.space.x))[3])
        u = surf.u.copy()
        u[k, j] += 0.5
        from dataclasses import replace
        caught = not viscosity_residual(replace(surf, u=u), spec, sch).passed
        ok &= rep.passed and caught
        parts.append(f"{name}@{sch.times.n_steps}x{sch.space.n_space} {rep.max_abs:.1e}"
                     f"<={rep.tol:.2g}{'' if caught else ' corruption MISSED'}")
    record(9, "viscosity residual", ok, "; ".join(parts), time.perf_counter() - t0, 60)


def _run_cli(args, out):
    subprocess.run([sys.executable, "-m", "mcss", *args, "--out", str(out)], check=True,
                   capture_output=True)
    return {p.name: p.read_bytes() for p in sorted(Path(out).iterdir())}


def test_10_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "put.json"
    cfg.write_text('{"problem": {"builtin": "american-put"}, "seed": 7}')
    same = True
    for mode, extra in (("value", ["--config", str(cfg)]), ("verify", ["--seeds", "1..2"])):
        runs = [_run_cli([mode, *extra, "--seed", "7", "--threads", str(th)],
                         tmp_path / f"{mode}-{th}-{rep}")
                for th, rep in ((1, 0), (1, 1), (2, 0), (8, 0))]
        same &= all(r == runs[0] for r in runs[1:]) and bool(runs[0])
    record(10, "determinism", same,
           "value and verify byte-identical over repeats at 1, 2 and 8 threads",
           time.perf_counter() - t0)
