import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcss.bsde import Policy, StoppingRule, solve_rbsde
from mcss.control import (bruteforce_value, dpp_check, linear_step_matrix, random_instance,
                          random_policy, random_stopping_rule, solve_u_alpha, solve_value,
                          strategy_bound)
from mcss.errors import SchemeError, ValidationError
from mcss.forward import TimeGrid, build_lattice
from mcss.model import builtin_registry


def drift_lattice(n_steps=2, n_space=4, h=None, T=1.0):
    spec = builtin_registry("controlled-drift", {
        "b2": 0.5, "controls": [-1.0, 0.0, 1.0], "s0": 0.2, "c_y": 0.0, "x_bound": 1.0,
        "g": {"shape": "affine", "c0": 0.0, "c1": 1.0}, "h": h, "T": T})
    return build_lattice(spec, -1, 1, n_space, TimeGrid(0, T, n_steps))


def test_linear_reward_prefers_upward_drift():
    lat = drift_lattice()
    surf = solve_value(lat)
    j = lat.x0_index
    # g(x) = x: the largest drift control is optimal away from the edges
    assert surf.controls[surf.policy.choice[0, j]] == 1.0
    up = solve_u_alpha(lat, Policy.constant(lat, 2)).u[0, j]
    assert surf.u[0, j] == pytest.approx(up, abs=1e-14)
    assert surf.u[0, j] > solve_u_alpha(lat, Policy.constant(lat, 0)).u[0, j]


def test_ties_go_to_lowest_index():
    spec = builtin_registry("controlled-drift", {"b2": 0.0, "controls": [-1.0, 0.0, 1.0],
                                                 "c_y": 0.0, "x_bound": 1.0})
    lat = build_lattice(spec, -1, 1, 4, TimeGrid(0, 1, 3))
    assert np.all(solve_value(lat).policy.choice[:-1] == 0)


@given(seed=st.integers(0, 5000))
@settings(max_examples=25, deadline=None)
def test_value_dominates_every_markov_policy(seed):
    lat = random_instance(seed, 5, 7, 3)
    u = solve_value(lat).u[0]
    rng = np.random.default_rng(seed)
    for _ in range(3):
        ua = solve_u_alpha(lat, random_policy(lat, rng)).u[0]
        assert np.all(ua <= u + 1e-12)


def test_value_is_reflected_solve_under_its_own_policy():
    lat = random_instance(21, 6, 9, 3)
    surf = solve_value(lat)
    again = solve_rbsde(lat, surf.policy).Y
    assert np.allclose(again, surf.u, atol=1e-13)
    assert np.all(surf.stop_region[-1])


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("shape", [(3, 5, 3, True), (4, 5, 2, False)])
def test_bruteforce_agrees(seed, shape):
    L, N, q, jumps = shape
    lat = random_instance(seed, L, N, q, jumps=jumps)
    assert bruteforce_value(lat) == pytest.approx(solve_value(lat).u[0, lat.x0_index], abs=1e-12)


def test_bruteforce_by_hand_one_step():
    lat = drift_lattice(n_steps=1, h={"shape": "affine", "c0": 0.05, "c1": 0.0}, T=0.5)
    j = lat.x0_index
    P = [M.toarray() for M in lat.P]
    best = max(float(Pq[j] @ lat.x) for Pq in P)
    assert bruteforce_value(lat) == pytest.approx(max(0.05, best), abs=1e-15)


def test_bruteforce_guards():
    with pytest.raises(SchemeError):
        bruteforce_value(random_instance(0, 5, 5, 2))
    lat = random_instance(0, 4, 5, 3, jumps=True)
    assert strategy_bound(lat) > 0


def test_dpp_equality_on_random_rules():
    lat = random_instance(5, 6, 9, 3)
    surf = solve_value(lat)
    rng = np.random.default_rng(2)
    for theta in [StoppingRule.immediate(lat), StoppingRule.at_horizon(lat),
                  *[random_stopping_rule(lat, rng) for _ in range(5)]]:
        rep = dpp_check(lat, theta, surface=surf)
        assert rep.passed, rep.to_dict()
    with pytest.raises(ValidationError):
        dpp_check(lat, "now")


def test_corrupted_surface_breaks_dpp():
    lat = random_instance(5, 6, 9, 3)
    surf = solve_value(lat)
    bad = surf.u.copy()
    bad[2:] += 0.1
    from dataclasses import replace
    rep = dpp_check(lat, StoppingRule.at_layer(lat, 2), surface=replace(surf, u=bad))
    assert not rep.passed


def test_random_instance_is_seeded_and_monotone():
    a, b = random_instance(9), random_instance(9)
    assert np.array_equal(a.P[0].toarray(), b.P[0].toarray())
    assert a.spec.params == b.spec.params
    c_z = a.spec.params["c_z"]
    gnu = np.asarray(a.spec.params["gamma"]) * np.asarray(a.spec.params["weights"])
    for q in range(a.n_controls):
        assert linear_step_matrix(a, q, c_z, gnu).min() >= -1e-15


def test_surface_csv(tmp_path):
    lat = drift_lattice()
    surf = solve_value(lat)
    p = tmp_path / "u.csv"
    surf.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,x,u,control,stop"
    assert len(lines) == 1 + 3 * 5
    assert surf.value_at(lat.x0) == float(lines[1 + lat.x0_index].split(",")[2])
    with pytest.raises(ValidationError):
        surf.value_at(0.1)
