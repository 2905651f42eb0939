import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcss.errors import SchemeError, ValidationError
from mcss.forward import (TimeGrid, build_lattice, central_mask, interp_variance,
                          local_consistency_check, simulate_paths)
from mcss.model import builtin_registry

BASE = {"b0": 0.0, "b1": 0.0, "s0": 0.0, "l0": 0.0, "l1": 0.0, "c_y": 0.0, "x_bound": 1.0}


def test_time_grid():
    g = TimeGrid(0.0, 1.0, 4)
    assert g.dt == 0.25
    assert g.times[-1] == 1.0
    sub = g.sub(1, 3)
    assert (sub.t0, sub.T, sub.n_steps) == (0.25, 0.75, 2)
    with pytest.raises(ValidationError):
        TimeGrid(0.0, 1.0, 0)


def test_pure_drift_kernel_is_upwind():
    spec = builtin_registry("affine", {**BASE, "b0": 0.5})
    lat = build_lattice(spec, -1, 1, 8, TimeGrid(0, 1, 10))
    P = lat.P[0].toarray()
    # dx = 0.25, dt = 0.1: move up with probability b dt / dx = 0.2
    assert P[4, 5] == pytest.approx(0.2)
    assert P[4, 4] == pytest.approx(0.8)
    assert P[4, 3] == pytest.approx(0.0)


def test_driftless_kernel_is_central():
    spec = builtin_registry("affine", {**BASE, "s0": 0.5})
    lat = build_lattice(spec, -1, 1, 8, TimeGrid(0, 1, 10))
    P = lat.P[0].toarray()
    # 0.5 sigma^2 dt / dx^2 = 0.5 * 0.25 * 0.1 / 0.0625 = 0.2
    assert P[4, 3] == pytest.approx(0.2)
    assert P[4, 5] == pytest.approx(0.2)
    assert P[4, 4] == pytest.approx(0.6)
    # zero-flux closure at the edge
    assert P[0].sum() == pytest.approx(1.0)
    assert P[0, 0] == pytest.approx(0.8)


def test_jump_branch_interpolates():
    spec = builtin_registry("affine", {**BASE, "marks": [0.125], "weights": [1.0], "c0": 1.0})
    lat = build_lattice(spec, -1, 1, 8, TimeGrid(0, 1, 10))
    J = lat.J[0][0].toarray()
    assert J[4, 4] == pytest.approx(0.5)
    assert J[4, 5] == pytest.approx(0.5)
    iv = interp_variance(lat.x, np.full((9, 1), 0.125), np.array([1.0]), -1, 1, 0.25)
    assert iv[4] == pytest.approx(0.25 * 0.25 ** 2)
    assert iv[-1] == pytest.approx(0.0)      # clamped onto the edge node


def test_central_mask_rule():
    assert central_mask(np.array([0.5]), np.array([0.1]), np.array([0.0]), 0.25)[0]
    assert not central_mask(np.array([0.1]), np.array([1.0]), np.array([0.0]), 0.25)[0]


@given(b0=st.floats(-0.4, 0.4), b1=st.floats(-0.3, 0.3), s0=st.floats(0.0, 0.5),
       mark=st.floats(0.05, 0.3), w=st.floats(0.0, 1.0), n=st.integers(6, 30))
@settings(max_examples=60, deadline=None)
def test_lattice_rows_are_probabilities_with_exact_mean(b0, b1, s0, mark, w, n):
    p = {**BASE, "b0": b0, "b1": b1, "s0": s0, "x_bound": 2.0}
    if w > 0.01:
        p.update(marks=[mark], weights=[w], c0=1.0)
    spec = builtin_registry("affine", p)
    dx = 4.0 / n
    rate = (s0 ** 2 + (abs(b0) + abs(b1) * 2 + mark * w) * dx) / dx ** 2 + w
    steps = max(1, int(np.ceil(rate / 0.9)))
    lat = build_lattice(spec, -2, 2, n, TimeGrid(0, 1, steps))
    P = lat.P[0].toarray()
    assert P.min() >= -1e-14
    assert np.allclose(P.sum(axis=1), 1.0)
    x = lat.x
    interior = (x - 2 * dx > -2) & (x + 2 * dx + mark < 2)
    mean = P @ x - x
    drift = spec.coefficients.b(x, 0.0) * lat.dt
    assert np.allclose(mean[interior], drift[interior], atol=1e-12)
    # the Brownian proxy has zero mean and variance dt
    W = lat.W[0].toarray()
    assert np.allclose(W.sum(axis=1), 0.0, atol=1e-12)
    nz = lat.xi2[0] > 0
    assert np.allclose(lat.xi2[0][nz], lat.dt)


@pytest.mark.parametrize("params", [
    {"s0": 0.3, "b0": 0.1, "b1": -0.2},
    {"s0": 0.3, "b0": 0.1, "marks": [0.2], "weights": [0.5], "c0": 1.0},
    {"s0": 0.05, "b0": 0.8},
])
def test_local_consistency(params):
    spec = builtin_registry("affine", {**BASE, **params, "x_bound": 3.0})
    lat = build_lattice(spec, -3, 3, 60, TimeGrid(0, 1, 200))
    rep = local_consistency_check(lat)
    assert rep.passed, rep.to_dict()


def test_cfl_violation_reports_max_dt():
    spec = builtin_registry("affine", {**BASE, "s0": 1.0})
    with pytest.raises(SchemeError) as err:
        build_lattice(spec, -1, 1, 40, TimeGrid(0, 1, 10))
    assert 0 < err.value.max_dt < 0.1
    lat = build_lattice(spec, -1, 1, 40, TimeGrid(0, 1, int(np.ceil(1 / err.value.max_dt))))
    assert lat.diagnostics["cfl_margin"] >= 0


def test_x0_must_be_node():
    spec = builtin_registry("affine", {**BASE, "s0": 0.1})
    lat = build_lattice(spec, -1, 1, 8, TimeGrid(0, 1, 4), x0=0.25)
    assert lat.x0 == 0.25
    with pytest.raises(ValidationError):
        build_lattice(spec, -1, 1, 8, TimeGrid(0, 1, 4), x0=0.1)
    with pytest.raises(ValidationError):
        lat.with_x0(0.3)
    assert lat.restrict(1, 3).n_steps == 2


def test_simulated_mean_matches_euler_recursion():
    p = {**BASE, "b0": 0.1, "b1": -0.5, "s0": 0.3, "marks": [0.2, -0.1], "weights": [1.0, 2.0],
         "c0": 1.0, "x_bound": 5.0}
    spec = builtin_registry("affine", p)
    grid = TimeGrid(0, 1, 20)
    batch = simulate_paths(spec, None, 0.5, grid, 20000, seed=11)
    m = 0.5
    for _ in range(grid.n_steps):
        m = m + (0.1 - 0.5 * m) * grid.dt        # compensated jumps add no mean
    xT = batch.states[:, -1]
    assert abs(xT.mean() - m) < 4 * xT.std() / np.sqrt(xT.size)
    n_jumps = np.array([np.count_nonzero(batch.jump_log[2] == i) for i in range(2)])
    expected = 20000 * 20 * np.array([1.0, 2.0]) * grid.dt
    assert np.all(np.abs(n_jumps - expected) < 5 * np.sqrt(expected))


def test_simulation_independent_of_threads():
    spec = builtin_registry("affine", {**BASE, "s0": 0.3, "marks": [0.2], "weights": [1.0],
                                       "c0": 1.0, "x_bound": 5.0})
    grid = TimeGrid(0, 1, 10)
    a = simulate_paths(spec, 0.0, 0.0, grid, 9000, seed=5, threads=1)
    b = simulate_paths(spec, 0.0, 0.0, grid, 9000, seed=5, threads=4)
    assert np.array_equal(a.states, b.states)
    assert all(np.array_equal(u, v) for u, v in zip(a.jump_log, b.jump_log))
    c = simulate_paths(spec, 0.0, 0.0, grid, 9000, seed=6)
    assert not np.array_equal(a.states, c.states)


def test_simulation_rejects_coarse_dt():
    spec = builtin_registry("affine", {**BASE, "marks": [0.2], "weights": [5.0], "c0": 1.0})
    with pytest.raises(SchemeError):
        simulate_paths(spec, None, 0.0, TimeGrid(0, 1, 4), 10)


def test_paths_csv_full_precision(tmp_path):
    spec = builtin_registry("affine", {**BASE, "s0": 0.3, "x_bound": 5.0})
    batch = simulate_paths(spec, None, 0.0, TimeGrid(0, 1, 3), 2, seed=1)
    rows = (tmp_path / "p.csv")
    batch.to_csv(rows)
    lines = rows.read_text().splitlines()
    assert lines[0] == "path,t,x"
    assert len(lines) == 1 + 2 * 4
    assert float(lines[-1].split(",")[2]) == batch.states[1, -1]
