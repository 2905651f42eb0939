"""Reference configurations of the builtin families.

Each case fixes parameters and a starting grid on which both routes are
stable; the cross-validation ladder, the residual checks and ``verify``
all start from here.
"""

from __future__ import annotations

import math

from .forward import Lattice, TimeGrid, build_lattice
from .model import ProblemSpec, builtin_registry
from .pide import PIDEScheme, SpatialGrid

CASES = {
    "affine": {
        "params": {"b0": 0.1, "b1": -0.2, "s0": 0.3, "l0": 0.0, "l1": 0.0, "c_y": 0.0,
                   "marks": [0.2], "weights": [0.5], "c0": 1.0, "x_bound": 3.0},
        "box": (-3.0, 3.0), "n_space": 60, "n_steps": 50,
    },
    "controlled-drift": {
        "params": {"b2": 1.0, "controls": [-1.0, 0.0, 1.0], "x_bound": 2.0,
                   "h": {"shape": "clipped-quadratic", "center": 0.5, "cap": 1.0, "scale": -1.0}},
        "box": (-2.0, 2.0), "n_space": 40, "n_steps": 40,
    },
    "american-put": {
        "params": {"strike": 1.0, "rate": 0.05, "vol": 0.2},
        "box": (-1.2, 1.2), "n_space": 60, "n_steps": 50,
    },
    "linear-pide": {
        "params": {"c_y": -0.05},
        "box": (-1.0, 3.0), "n_space": 80, "n_steps": 25,
    },
}


def case_spec(name: str) -> ProblemSpec:
    return builtin_registry(name, CASES[name]["params"])


def case_grids(name: str, n_steps: int = None, n_space: int = None, spec=None):
    """(spec, lattice, scheme) on the case's grid, optionally resized."""
    c = CASES[name]
    spec = spec or case_spec(name)
    ns = n_space or c["n_space"]
    grid = TimeGrid(0.0, spec.horizon_T, n_steps or c["n_steps"])
    lo, hi = c["box"]
    lat = build_lattice(spec, lo, hi, ns, grid)
    return spec, lat, PIDEScheme(grid, SpatialGrid(lo, hi, ns))


def exact_value(name: str):
    """Closed-form u(0, x0) where one is known, else None."""
    p = CASES[name]["params"]
    if name == "affine" and p["l0"] == p["l1"] == p["c_y"] == 0.0:
        b0, b1 = p["b0"], p["b1"]
        spec = case_spec(name)
        T, x0 = spec.horizon_T, spec.x0
        e = math.exp(b1 * T)
        return x0 * e + (b0 / b1) * (e - 1.0) if b1 else x0 + b0 * T
    if name == "linear-pide":
        spec = case_spec(name)
        return spec.x0 * math.exp(p["c_y"] * spec.horizon_T)
    return None
