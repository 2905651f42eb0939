import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcss.corpus import case_grids
from mcss.errors import SchemeError, ValidationError
from mcss.forward import TimeGrid, build_lattice
from mcss.model import builtin_registry
from mcss.pide import (PIDEScheme, SpatialGrid, american_put_binomial, apply_generator,
                       compare_routes, cross_validate, interior_mask, residual_field,
                       solve_hjbvi, viscosity_residual)
from mcss.control import solve_value

BASE = {"b0": 0.0, "b1": 0.0, "s0": 0.0, "l0": 0.0, "l1": 0.0, "c_y": 0.0, "x_bound": 2.0}


def bs_put(S, K, r, vol, T):
    d1 = (math.log(S / K) + (r + 0.5 * vol ** 2) * T) / (vol * math.sqrt(T))
    d2 = d1 - vol * math.sqrt(T)
    N = lambda v: 0.5 * (1 + math.erf(v / math.sqrt(2)))  # noqa: E731
    return K * math.exp(-r * T) * N(-d2) - S * N(-d1)


@given(b=st.floats(-0.5, 0.5), s=st.floats(0.3, 1.0), c=st.floats(-1, 1))
@settings(max_examples=50, deadline=None)
def test_generator_exact_on_quadratics(b, s, c):
    spec = builtin_registry("affine", {**BASE, "b0": b, "s0": s})
    space = SpatialGrid(-2, 2, 40)
    x = space.x
    gt = apply_generator(spec, space, c + x ** 2, 0.0)
    inner = slice(1, -1)
    assert np.allclose(gt.A[inner], (s ** 2 + 2 * b * x)[inner], atol=1e-10)
    assert np.allclose(gt.z[inner], (s * 2 * x)[inner], atol=1e-10)


def test_compensated_jump_term_vanishes_on_linear():
    spec = builtin_registry("affine", {**BASE, "s0": 0.5, "marks": [0.1, -0.15],
                                       "weights": [1.0, 2.0], "c0": 1.0})
    space = SpatialGrid(-2, 2, 40)
    gt = apply_generator(spec, space, 3.0 * space.x, 0.0)
    assert np.allclose(gt.K[4:-4], 0.0, atol=1e-12)
    assert np.allclose(gt.B[4:-4], [0.3, -0.45])
    with pytest.raises(ValidationError):
        apply_generator(spec, space, np.zeros(3), 0.0)


def test_stability_guard():
    spec = builtin_registry("affine", {**BASE, "s0": 1.0})
    sch = PIDEScheme(TimeGrid(0, 1, 10), SpatialGrid(-2, 2, 40))
    with pytest.raises(SchemeError) as err:
        solve_hjbvi(spec, sch)
    ok = PIDEScheme(TimeGrid(0, 1, int(math.ceil(1 / err.value.max_dt))), SpatialGrid(-2, 2, 40))
    solve_hjbvi(spec, ok)
    with pytest.raises(ValidationError):
        PIDEScheme(TimeGrid(0, 1, 10), SpatialGrid(-2, 2, 40), cfl_margin=0.01)
    with pytest.raises(ValidationError):
        PIDEScheme(TimeGrid(0, 1, 10), SpatialGrid(-2, 2, 40), boundary="periodic")


def test_linear_pide_explicit_step_is_exact():
    spec, lat, sch = case_grids("linear-pide")
    u = solve_hjbvi(spec, sch).u
    j = lat.x0_index
    n, dt = sch.times.n_steps, sch.times.dt
    # L x = 0 for the compensated generator, so each step multiplies by (1 + c_y dt)
    assert u[0, j] == pytest.approx(spec.x0 * (1 - 0.05 * dt) ** n, rel=1e-12)
    chain = solve_value(lat).u[0, j]
    assert chain == pytest.approx(spec.x0 * (1 + 0.05 * dt) ** -n, rel=1e-12)


def test_hjbvi_respects_obstacle_and_terminal():
    spec, lat, sch = case_grids("american-put")
    surf, branch = solve_hjbvi(spec, sch, with_branch=True)
    h = np.maximum(1 - np.exp(sch.space.x), 0.0)
    assert np.all(surf.u[:-1] >= h - 1e-14)
    assert np.allclose(surf.u[-1], h)
    assert set(np.unique(branch)) == {"obstacle", "pde"}
    assert np.all(branch[surf.stop_region] == "obstacle")


def test_binomial_oracle_against_black_scholes():
    # without interest early exercise is worthless, so the tree is European
    assert american_put_binomial(1.0, 1.0, 0.0, 0.2, 1.0, 2000) == pytest.approx(
        bs_put(1.0, 1.0, 0.0, 0.2, 1.0), rel=1e-3)
    am = american_put_binomial(1.0, 1.0, 0.05, 0.2, 1.0, 2000)
    assert am > bs_put(1.0, 1.0, 0.05, 0.2, 1.0)
    assert am == pytest.approx(0.0609, abs=2e-4)


def test_residual_small_on_solution_and_flags_corruption():
    spec, lat, sch = case_grids("controlled-drift", n_steps=80)
    surf = solve_hjbvi(spec, sch)
    rep = viscosity_residual(surf, spec, sch)
    assert rep.passed, rep.to_dict()
    j = int(np.flatnonzero(interior_mask(sch.space.x))[5])
    bad_u = surf.u.copy()
    bad_u[10, j] += 0.5
    bad = viscosity_residual(replace(surf, u=bad_u), spec, sch)
    assert not bad.passed
    assert any(w[0] in (9, 10) and w[1] == j for w in bad.worst)


def test_terminal_kink_layer_excluded_by_time_band():
    spec, lat, sch = case_grids("american-put", n_steps=200, n_space=120)
    surf = solve_hjbvi(spec, sch)
    full = viscosity_residual(surf, spec, sch, time_band=0.0)
    inner = viscosity_residual(surf, spec, sch)
    # the worst raw residual sits at the last step next to the strike
    assert full.worst[0][0] == 199
    assert inner.max_abs < full.max_abs / 5
    assert inner.passed


def test_residual_field_shape_guard():
    spec, lat, sch = case_grids("affine")
    surf = solve_hjbvi(spec, sch)
    R, br = residual_field(surf, spec, sch)
    assert np.isnan(R[-1]).all()
    other = PIDEScheme(TimeGrid(0, 1, 60), sch.space)
    with pytest.raises(ValidationError):
        residual_field(surf, spec, other)


def test_compare_routes_rejects_mismatched_grids():
    spec, lat, sch = case_grids("affine")
    with pytest.raises(ValidationError):
        compare_routes(spec, lat, PIDEScheme(TimeGrid(0, 1, 60), sch.space))
    with pytest.raises(ValidationError):
        cross_validate(spec, lat, sch, refine=0)


def test_cross_validate_ladder():
    spec, lat, sch = case_grids("affine")
    rep = cross_validate(spec, lat, sch, refine=2)
    assert len(rep.rows) == 2
    assert rep.rows[1]["n_steps"] == 2 * rep.rows[0]["n_steps"]
    assert rep.passed, rep.to_dict()
    assert PIDEScheme.matching(lat).space.n_nodes == lat.n_nodes
