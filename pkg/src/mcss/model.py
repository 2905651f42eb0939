"""Problem instances: coefficients, mark measure, driver, rewards, controls.

All callbacks are vectorized numpy functions.  Scalars and arrays must both
work, and the jump vector ``k`` always carries the mark axis last, so a
driver sees ``k`` with shape ``(..., m)``.
"""

from __future__ import annotations

import difflib
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np
from scipy.stats import qmc

from .errors import ConfigurationError, DimensionError, DomainError, ValidationError

# Finite stand-in for an absent obstacle (h = -inf).  Reflection against it is
# short-circuited and it is never passed to a driver.
OBSTACLE_OFF = -1e300

ASSUMPTION_TOL = 1e-9


@dataclass(frozen=True)
class MarkMeasure:
    """Finitely many jump marks with intensities ``weights`` and bound ``psi``."""

    marks: tuple = ()
    weights: tuple = ()
    psi: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "marks", tuple(float(e) for e in self.marks))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        psi = self.psi if len(self.psi) else tuple(1.0 for _ in self.marks)
        object.__setattr__(self, "psi", tuple(float(p) for p in psi))
        if not (len(self.marks) == len(self.weights) == len(self.psi)):
            raise DimensionError("marks, weights and psi must have equal length")
        if any(w <= 0 for w in self.weights):
            raise ValidationError("mark weights must be strictly positive")
        if any(p <= 0 for p in self.psi):
            raise ValidationError("psi must be strictly positive")
        if any(e == 0 for e in self.marks):
            raise ValidationError("jump marks live in R \\ {0}")

    @property
    def m(self) -> int:
        return len(self.marks)

    @property
    def nu(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def total_mass(self) -> float:
        return float(sum(self.weights))

    @property
    def psi_norm2(self) -> float:
        return float(sum(w * p * p for w, p in zip(self.weights, self.psi)))


def l2nu_inner(mm: MarkMeasure, k, k2) -> Any:
    """Weighted inner product sum_i nu_i k_i k2_i over the last axis."""
    k = np.asarray(k, dtype=float)
    k2 = np.asarray(k2, dtype=float)
    if k.shape[-1:] != (mm.m,) or k2.shape[-1:] != (mm.m,):
        raise DimensionError(
            f"expected vectors of length {mm.m}, got {k.shape} and {k2.shape}"
        )
    out = np.sum(k * k2 * mm.nu, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def l2nu_norm(mm: MarkMeasure, k) -> Any:
    return np.sqrt(l2nu_inner(mm, k, k))


@dataclass(frozen=True)
class CoefficientSet:
    """Drift ``b(x, a)``, diffusion ``sigma(x, a)``, jump size ``beta(x, a, i)``."""

    b: Callable
    sigma: Callable
    beta: Callable
    lipschitz_C: float = 0.0


@dataclass(frozen=True)
class Driver:
    """BSDE generator ``f(a, t, x, y, z, k)`` with its monotonicity witness."""

    f: Callable
    gamma: Callable
    lipschitz_C: float = 0.0
    growth_C: float = 0.0
    growth_p: int = 1


@dataclass(frozen=True)
class RewardSpec:
    """Running reward ``h(t, x)`` (None means no obstacle) and terminal ``g(x)``."""

    h: Optional[Callable]
    g: Callable
    growth_C: float = 0.0
    growth_p: int = 1
    lipschitz_h: float = 0.0


@dataclass(frozen=True)
class ControlGrid:
    values: tuple
    a_min: Optional[float] = None
    a_max: Optional[float] = None

    def __post_init__(self):
        vals = tuple(sorted(float(v) for v in self.values))
        if not vals:
            raise ValidationError("control grid must be nonempty")
        lo = vals[0] if self.a_min is None else float(self.a_min)
        hi = vals[-1] if self.a_max is None else float(self.a_max)
        if vals[0] < lo or vals[-1] > hi:
            raise ValidationError(f"controls {vals} leave the declared set [{lo}, {hi}]")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "a_min", lo)
        object.__setattr__(self, "a_max", hi)

    def __len__(self):
        return len(self.values)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class ProblemSpec:
    coefficients: CoefficientSet
    marks: MarkMeasure
    driver: Driver
    rewards: RewardSpec
    controls: ControlGrid
    horizon_T: float
    name: str = "custom"
    params: Mapping = field(default_factory=dict)
    # box over which assumptions are sampled; also the natural truncation box
    state_box: tuple = (-5.0, 5.0)
    x0: float = 0.0

    def __post_init__(self):
        if not self.horizon_T > 0:
            raise ValidationError("horizon_T must be positive")
        if not self.state_box[0] < self.state_box[1]:
            raise ValidationError("state_box must be an increasing pair")

    @property
    def has_obstacle(self) -> bool:
        return self.rewards.h is not None


def obstacle_values(spec: ProblemSpec, t: float, x) -> np.ndarray:
    """h(t, x) as an array, or the OBSTACLE_OFF sentinel when h is absent."""
    x = np.asarray(x, dtype=float)
    if spec.rewards.h is None:
        return np.full(x.shape, OBSTACLE_OFF)
    return np.broadcast_to(np.asarray(spec.rewards.h(t, x), dtype=float), x.shape).copy()


def eval_bar_h(spec: ProblemSpec, t: float, x):
    """Stopping reward: h(t, x) before the horizon, g(x) at t == T."""
    T = spec.horizon_T
    if t < 0 or t > T:
        raise DomainError(f"t={t} outside [0, {T}]")
    if t == T:
        out = np.asarray(spec.rewards.g(np.asarray(x, dtype=float)), dtype=float)
    else:
        out = obstacle_values(spec, t, x)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# assumption checking
# ---------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    margins: dict
    sample_count: int
    seed: int
    tol: float = ASSUMPTION_TOL

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.margins.values())

    @property
    def failures(self) -> list:
        return [k for k, v in self.margins.items() if v > self.tol]

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "margins": dict(self.margins),
            "failures": self.failures,
            "sample_count": self.sample_count,
            "seed": self.seed,
        }


def _worst(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return -math.inf
    if np.any(~np.isfinite(values)):
        return math.inf
    return float(np.max(values))


def check_assumptions(spec: ProblemSpec, sample_count: int = 10_000, seed: int = 0,
                      box: Optional[Mapping] = None) -> AssumptionReport:
    """Sampled verification of the standing assumptions on ``spec``.

    Points are drawn from a scrambled Halton sequence over the box
    ``a in A, t in [0, T], x in state_box, y, z, k_i in [-R, R]`` (``R`` from
    ``box``, default 5).  Each margin is the worst violation found; a margin
    at or below 1e-9 counts as satisfied.
    """
    if sample_count < 1:
        raise DomainError("sample_count must be >= 1")
    box = dict(box or {})
    x_lo, x_hi = box.get("x", spec.state_box)
    y_lo, y_hi = box.get("y", (-5.0, 5.0))
    z_lo, z_hi = box.get("z", (-5.0, 5.0))
    k_lo, k_hi = box.get("k", (-5.0, 5.0))
    a_lo, a_hi = spec.controls.a_min, spec.controls.a_max
    T = spec.horizon_T
    mm = spec.marks
    m = mm.m
    nu = mm.nu
    psi = np.asarray(mm.psi)

    dim = 5 + 2 * m
    sampler = qmc.Halton(d=dim, scramble=True, seed=seed)
    u = sampler.random(sample_count)
    rng = np.random.default_rng(seed)

    def scale(col, lo, hi):
        return lo + (hi - lo) * col

    a = scale(u[:, 0], a_lo, a_hi)
    t = scale(u[:, 1], 0.0, T)
    x = scale(u[:, 2], x_lo, x_hi)
    y = scale(u[:, 3], y_lo, y_hi)
    z = scale(u[:, 4], z_lo, z_hi)
    k1 = scale(u[:, 5:5 + m], k_lo, k_hi)
    k2 = scale(u[:, 5 + m:5 + 2 * m], k_lo, k_hi)

    # partner points: half local perturbations, half independent draws
    def partner(v, lo, hi):
        near = np.clip(v + 1e-3 * (hi - lo) * rng.standard_normal(v.shape), lo, hi)
        far = lo + (hi - lo) * rng.random(v.shape)
        half = v.shape[0] // 2
        return np.concatenate([near[:half], far[half:]])

    a_p = partner(a, a_lo, a_hi)
    x_p = partner(x, x_lo, x_hi)
    y_p = partner(y, y_lo, y_hi)
    z_p = partner(z, z_lo, z_hi)
    k_p = partner(k1, k_lo, k_hi)

    drv = spec.driver
    co = spec.coefficients
    rw = spec.rewards
    zeros = np.zeros_like(x)
    k_zero = np.zeros((sample_count, m))
    margins = {}

    with np.errstate(all="ignore"):
        f0 = np.asarray(drv.f(a, t, x, zeros, zeros, k_zero), dtype=float)
        margins["driver_growth"] = _worst(
            np.abs(f0) - drv.growth_C * (1 + np.abs(x) ** drv.growth_p))

        fa = np.asarray(drv.f(a, t, x, y, z, k1), dtype=float)
        fb = np.asarray(drv.f(a_p, t, x_p, y_p, z_p, k_p), dtype=float)
        dk = l2nu_norm(mm, k1 - k_p) if m else zeros
        dist = np.abs(a - a_p) + np.abs(x - x_p) + np.abs(y - y_p) + np.abs(z - z_p) + dk
        margins["driver_lipschitz"] = _worst(np.abs(fa - fb) - drv.lipschitz_C * dist)

        if m:
            g = np.asarray(drv.gamma(a, t, x, y, z, k1, k2), dtype=float)
            g = np.broadcast_to(g, (sample_count, m))
            margins["gamma_lower"] = _worst(-1.0 - g)
            margins["gamma_psi"] = _worst(np.abs(g) - psi)
            f_k2 = np.asarray(drv.f(a, t, x, y, z, k2), dtype=float)
            margins["driver_monotone"] = _worst(l2nu_inner(mm, g, k2 - k1) - (f_k2 - fa))
        else:
            margins["gamma_lower"] = -math.inf
            margins["gamma_psi"] = -math.inf
            margins["driver_monotone"] = -math.inf

        C = co.lipschitz_C
        dxa = np.abs(x - x_p) + np.abs(a - a_p)
        margins["drift_lipschitz"] = _worst(
            np.abs(np.asarray(co.b(x, a)) - np.asarray(co.b(x_p, a_p))) - C * dxa)
        margins["sigma_lipschitz"] = _worst(
            np.abs(np.asarray(co.sigma(x, a)) - np.asarray(co.sigma(x_p, a_p))) - C * dxa)
        beta_dom = []
        beta_lip = []
        for i in range(m):
            bi = np.asarray(co.beta(x, a, i), dtype=float) * np.ones_like(x)
            bj = np.asarray(co.beta(x_p, a_p, i), dtype=float) * np.ones_like(x)
            beta_dom.append(np.abs(bi) - C * psi[i])
            beta_lip.append(np.abs(bi - bj) - C * dxa * psi[i])
        margins["beta_domination"] = _worst(np.concatenate(beta_dom)) if m else -math.inf
        margins["beta_lipschitz"] = _worst(np.concatenate(beta_lip)) if m else -math.inf

        gx = np.asarray(rw.g(x), dtype=float)
        hx = np.asarray(rw.h(t, x), dtype=float) if rw.h is not None else zeros
        margins["reward_growth"] = _worst(
            np.abs(hx) + np.abs(gx) - rw.growth_C * (1 + np.abs(x) ** rw.growth_p))
        if rw.h is not None:
            hx_p = np.asarray(rw.h(t, x_p), dtype=float)
            margins["h_lipschitz"] = _worst(np.abs(hx - hx_p) - rw.lipschitz_h * np.abs(x - x_p))
        else:
            margins["h_lipschitz"] = -math.inf

        bad = ~np.isfinite(fa)
        margins["finite_values"] = math.inf if bad.any() else -math.inf

    return AssumptionReport(margins=margins, sample_count=sample_count, seed=seed)


# ---------------------------------------------------------------------------
# builtin families
# ---------------------------------------------------------------------------

def reward_shape(desc) -> tuple:
    """Build a reward function of x from a shape descriptor.

    Returns ``(fn, growth_constant, lipschitz_constant)`` with growth exponent 1.
    ``None`` or ``{"shape": "none"}`` returns ``(None, 0, 0)``.
    """
    if desc is None:
        return None, 0.0, 0.0
    if not isinstance(desc, Mapping) or "shape" not in desc:
        raise ConfigurationError(f"reward shape must be a mapping with 'shape': {desc!r}")
    kind = desc["shape"]
    allowed = {
        "none": (),
        "affine": ("c0", "c1"),
        "put": ("strike",),
        "call": ("strike",),
        "put-exp": ("strike",),
        "step": ("at", "low", "high"),
        "clipped-quadratic": ("center", "cap", "scale"),
    }
    if kind not in allowed:
        raise ConfigurationError(
            f"unknown reward shape {kind!r}; known: {sorted(allowed)}")
    extra = set(desc) - set(allowed[kind]) - {"shape"}
    if extra:
        raise ConfigurationError(f"unknown keys for shape {kind!r}: {sorted(extra)}")
    p = {key: float(desc.get(key, 0.0)) for key in allowed[kind]}

    if kind == "none":
        return None, 0.0, 0.0
    if kind == "affine":
        c0, c1 = p["c0"], p["c1"]
        return (lambda x: c0 + c1 * np.asarray(x, dtype=float)), max(abs(c0), abs(c1)), abs(c1)
    if kind == "put":
        K = p["strike"]
        return (lambda x: np.maximum(K - np.asarray(x, dtype=float), 0.0)), max(abs(K), 1.0), 1.0
    if kind == "call":
        K = p["strike"]
        return (lambda x: np.maximum(np.asarray(x, dtype=float) - K, 0.0)), max(abs(K), 1.0), 1.0
    if kind == "put-exp":
        K = p["strike"]
        if K <= 0:
            raise ConfigurationError("put-exp strike must be positive")
        return (lambda x: np.maximum(K - np.exp(np.asarray(x, dtype=float)), 0.0)), K, K
    if kind == "step":
        at, lo, hi = p["at"], p["low"], p["high"]
        fn = lambda x: np.where(np.asarray(x, dtype=float) > at, hi, lo) * 1.0  # noqa: E731
        return fn, max(abs(lo), abs(hi)), math.inf
    c, cap, s = p["center"], p["cap"], p["scale"]
    if cap < 0:
        raise ConfigurationError("clipped-quadratic cap must be >= 0")
    fn = lambda x: s * np.minimum((np.asarray(x, dtype=float) - c) ** 2, cap)  # noqa: E731
    return fn, abs(s) * cap, 2 * abs(s) * math.sqrt(cap)


_COMMON_DEFAULTS = {
    "b0": 0.0, "b1": 0.0, "b2": 0.0,
    "s0": 0.0, "s2": 0.0, "sigma_min": 0.0,
    "c0": 0.0, "c2": 0.0,
    "marks": [], "weights": [], "gamma": [],
    "l0": 0.0, "l1": 0.0, "l2": 0.0, "l3": 0.0,
    "c_y": 0.0, "c_z": 0.0,
    "controls": [0.0], "a_min": None, "a_max": None,
    "T": 1.0, "h": None, "g": {"shape": "affine", "c0": 0.0, "c1": 1.0},
    "x_bound": 5.0, "x0": 0.0,
}

FAMILIES = {
    "affine": {
        "required": ("b0", "b1", "s0", "l0", "l1", "c_y"),
        "defaults": {},
    },
    "controlled-drift": {
        "required": ("b2", "controls"),
        "defaults": {"s0": 0.3, "l2": 0.0, "c_y": -0.05,
                     "g": {"shape": "clipped-quadratic", "center": 0.0, "cap": 1.0, "scale": -1.0}},
    },
    "american-put": {
        "required": ("strike", "rate", "vol"),
        "defaults": {"spot": 1.0, "T": 1.0, "x_bound": 3.0},
    },
    "linear-pide": {
        "required": ("c_y",),
        "defaults": {"sigma": 0.2, "marks": [-0.1, 0.1], "weights": [0.5, 0.5],
                     "gamma": [0.0, 0.0], "c_jump": 1.0, "x0": 1.0,
                     "g": {"shape": "affine", "c0": 0.0, "c1": 1.0}},
    },
}

_FAMILY_KEYS = {
    "affine": set(_COMMON_DEFAULTS),
    "controlled-drift": set(_COMMON_DEFAULTS),
    "american-put": {"strike", "rate", "vol", "spot", "T", "x_bound"},
    "linear-pide": {"c_y", "sigma", "marks", "weights", "gamma", "c_jump", "T", "g",
                    "x_bound", "x0"},
}


def family_keys(name: str) -> set:
    return set(_FAMILY_KEYS[name])


def _unknown_key_error(key: str, allowed, where: str) -> ConfigurationError:
    close = difflib.get_close_matches(key, sorted(allowed), n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigurationError(f"unknown key {where}{key!r}{hint}")


def builtin_registry(name: str, params: Optional[Mapping] = None) -> ProblemSpec:
    """Construct a ProblemSpec from one of the closed builtin families.

    Families share one affine template: b = b0 + b1 x + b2 a,
    sigma = max(s0 + s2 a, sigma_min), beta = e_i (c0 + c2 a) and
    f = l0 + l1 x + l2 a + l3 x a + c_y y + c_z z + sum_i gamma_i nu_i k_i.
    ``american-put`` works in log-price coordinates, ``linear-pide`` has a
    single control and no obstacle.
    """
    params = dict(params or {})
    if name not in FAMILIES:
        raise ConfigurationError(f"unknown builtin {name!r}; known: {sorted(FAMILIES)}")
    fam = FAMILIES[name]
    missing = [k for k in fam["required"] if k not in params]
    if missing:
        raise ConfigurationError(f"builtin {name!r} missing parameters: {missing}")
    allowed = _FAMILY_KEYS[name]
    for key in params:
        if key not in allowed:
            raise _unknown_key_error(key, allowed, f"in {name} params: ")

    if name == "american-put":
        K, r, vol = float(params["strike"]), float(params["rate"]), float(params["vol"])
        spot = float(params.get("spot", 1.0))
        if K <= 0 or vol < 0 or spot <= 0:
            raise ConfigurationError("american-put needs strike > 0, spot > 0, vol >= 0")
        p = dict(_COMMON_DEFAULTS)
        p.update(b0=r - 0.5 * vol * vol, s0=vol, c_y=-r,
                 h={"shape": "put-exp", "strike": K}, g={"shape": "put-exp", "strike": K},
                 T=float(params.get("T", 1.0)), x_bound=float(params.get("x_bound", 3.0)),
                 x0=math.log(spot))
    elif name == "linear-pide":
        p = dict(_COMMON_DEFAULTS)
        merged = {**fam["defaults"], **params}
        p.update(s0=float(merged["sigma"]), marks=list(merged["marks"]),
                 weights=list(merged["weights"]), gamma=list(merged["gamma"]),
                 c0=float(merged["c_jump"]), c_y=float(merged["c_y"]), h=None,
                 g=merged["g"], T=float(merged.get("T", 1.0)),
                 x_bound=float(merged.get("x_bound", 5.0)), x0=float(merged["x0"]))
    else:
        p = dict(_COMMON_DEFAULTS)
        p.update(fam["defaults"])
        p.update(params)
    return _affine_family(name, p, dict(params))


def _affine_family(name: str, p: Mapping, raw_params: Mapping) -> ProblemSpec:
    b0, b1, b2 = float(p["b0"]), float(p["b1"]), float(p["b2"])
    s0, s2, smin = float(p["s0"]), float(p["s2"]), float(p["sigma_min"])
    c0, c2 = float(p["c0"]), float(p["c2"])
    marks = [float(e) for e in p["marks"]]
    weights = [float(w) for w in p["weights"]]
    gam = [float(g) for g in p["gamma"]] if p["gamma"] else [0.0] * len(marks)
    if not (len(marks) == len(weights) == len(gam)):
        raise ConfigurationError("marks, weights and gamma must have equal length")
    if any(g_ < -1 for g_ in gam):
        raise ConfigurationError("builtin drivers require gamma_i >= -1")
    l0, l1, l2, l3 = (float(p[k]) for k in ("l0", "l1", "l2", "l3"))
    c_y, c_z = float(p["c_y"]), float(p["c_z"])
    controls = ControlGrid(tuple(p["controls"]), p["a_min"], p["a_max"])
    A = max(abs(controls.a_min), abs(controls.a_max))
    X = float(p["x_bound"])
    T = float(p["T"])

    psi = [max(abs(e), abs(g_)) for e, g_ in zip(marks, gam)]
    mm = MarkMeasure(tuple(marks), tuple(weights), tuple(psi))
    e_arr = np.asarray(marks)
    gnu = np.asarray(gam) * np.asarray(weights)
    gam_arr = np.asarray(gam)

    def b(x, a):
        return b0 + b1 * np.asarray(x, dtype=float) + b2 * np.asarray(a, dtype=float)

    def sigma(x, a):
        val = s0 + s2 * np.asarray(a, dtype=float) + 0.0 * np.asarray(x, dtype=float)
        return np.maximum(val, smin)

    def beta(x, a, i):
        return e_arr[i] * (c0 + c2 * np.asarray(a, dtype=float)) + 0.0 * np.asarray(x, dtype=float)

    beta_ratio = [abs(e) * max(abs(c0 + c2 * controls.a_min), abs(c0 + c2 * controls.a_max)) / ps
                  for e, ps in zip(marks, psi)]
    beta_lip = [abs(e) * abs(c2) / ps for e, ps in zip(marks, psi)]
    coeff_C = max([abs(b1), abs(b2), abs(s2)] + beta_ratio + beta_lip + [0.0])
    coeffs = CoefficientSet(b=b, sigma=sigma, beta=beta, lipschitz_C=coeff_C)

    def f(a, t, x, y, z, k):
        a = np.asarray(a, dtype=float)
        x = np.asarray(x, dtype=float)
        out = l0 + l1 * x + l2 * a + l3 * x * a + c_y * np.asarray(y) + c_z * np.asarray(z)
        if gnu.size:
            out = out + np.asarray(k, dtype=float) @ gnu
        return out

    def gamma(a, t, x, y, z, k1, k2):
        shape = np.broadcast(np.asarray(a), np.asarray(x), np.asarray(y)).shape
        return np.broadcast_to(gam_arr, shape + (gam_arr.size,))

    gnorm = math.sqrt(float(np.sum(np.asarray(weights) * gam_arr ** 2))) if marks else 0.0
    drv_C = max(abs(l2) + abs(l3) * X, abs(l1) + abs(l3) * A, abs(c_y), abs(c_z), gnorm)
    drv_growth = max(abs(l0) + abs(l2) * A, abs(l1) + abs(l3) * A)
    driver = Driver(f=f, gamma=gamma, lipschitz_C=drv_C, growth_C=drv_growth, growth_p=1)

    g_fn, g_growth, _ = reward_shape(p["g"])
    if g_fn is None:
        raise ConfigurationError("terminal reward g is required")
    h_shape, h_growth, h_lip = reward_shape(p["h"])
    h_fn = None if h_shape is None else (lambda t, x, _s=h_shape: _s(x))
    rewards = RewardSpec(h=h_fn, g=g_fn, growth_C=g_growth + h_growth, growth_p=1,
                         lipschitz_h=h_lip)

    return ProblemSpec(coefficients=coeffs, marks=mm, driver=driver, rewards=rewards,
                       controls=controls, horizon_T=T, name=name, params=raw_params,
                       state_box=(-X, X), x0=float(p["x0"]))
