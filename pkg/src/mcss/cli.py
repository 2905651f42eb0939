"""Command-line entry point: config loading, dispatch and artifact output.

Exit codes: 0 success, 1 validation or configuration error, 2 scheme or
CFL error, 3 a check or property suite failed.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, SchemeError, ValidationError

log = logging.getLogger("mcss")

EXIT_OK, EXIT_VALIDATION, EXIT_SCHEME, EXIT_FAILED = 0, 1, 2, 3

MODES = ("simulate", "solve-bsde", "solve-rbsde", "value", "hjbvi", "cross-validate",
         "dpp-check", "verify", "check-assumptions")

_TOP_KEYS = {"problem", "grids", "mode", "output_dir", "seed", "threads", "tolerances",
             "scheme", "simulate", "cross_validate", "dpp", "verify", "assumptions", "policy"}
_SECTION_KEYS = {
    "problem": {"builtin", "params"},
    "grids": {"n_steps", "n_space", "x_min", "x_max", "x0"},
    "tolerances": {"residual", "cross", "dpp"},
    "scheme": {"cfl_margin", "boundary"},
    "simulate": {"n_paths"},
    "cross_validate": {"refine", "space_factor", "band", "exclude"},
    "dpp": {"rules", "stop_probability"},
    "verify": {"seeds"},
    "assumptions": {"sample_count"},
}


@dataclass
class RunConfig:
    problem: str
    params: dict
    grids: dict
    mode: Optional[str] = None
    output_dir: str = "out"
    seed: int = 0
    threads: int = 1
    policy: int = 0
    tolerances: dict = dc_field(default_factory=dict)
    scheme: dict = dc_field(default_factory=lambda: {"cfl_margin": 0.05, "boundary": "reflecting"})
    options: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _reject(key: str, allowed, path: str) -> ConfigurationError:
    close = difflib.get_close_matches(key, sorted(allowed), n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigurationError(f"unknown key '{path}{key}'{hint}")


def _positive_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        raise ConfigurationError(f"{path} must be a positive integer, got {value!r}")
    return value


def parse_seeds(text) -> list:
    """'1..20', '3', '1,4,9' or a list of ints."""
    if isinstance(text, list):
        return [int(v) for v in text]
    text = str(text).strip()
    out = []
    try:
        for part in text.split(","):
            if ".." in part:
                a, b = part.split("..")
                lo, hi = int(a), int(b)
                if hi < lo:
                    raise ValueError
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise ConfigurationError(f"bad seed list {text!r}; use e.g. 1..20 or 1,2,3") from None
    return out


def parse_config(source) -> RunConfig:
    """Load and validate a JSON run configuration.

    ``source`` is a path, ``"-"`` for stdin, a JSON string or a dict.
    """
    from .corpus import CASES
    from .model import FAMILIES, family_keys

    if isinstance(source, dict):
        doc = source
    else:
        if source == "-":
            text = sys.stdin.read()
        elif isinstance(source, str) and source.lstrip().startswith("{"):
            text = source
        else:
            try:
                text = Path(source).read_text()
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {source}: {exc}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(
                f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    for key in doc:
        if key not in _TOP_KEYS:
            raise _reject(key, _TOP_KEYS, "")
    for sec, allowed in _SECTION_KEYS.items():
        val = doc.get(sec, {})
        if not isinstance(val, dict):
            raise ConfigurationError(f"{sec} must be an object")
        for key in val:
            if key not in allowed:
                raise _reject(key, allowed, f"{sec}.")

    prob = doc.get("problem")
    if not prob or "builtin" not in prob:
        raise ConfigurationError("problem.builtin is required")
    name = prob["builtin"]
    if name not in FAMILIES:
        close = difflib.get_close_matches(str(name), sorted(FAMILIES), n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        raise ConfigurationError(f"unknown problem.builtin {name!r}{hint}")
    case = CASES.get(name, {})
    params = dict(case.get("params", {}))
    user = prob.get("params", {})
    if not isinstance(user, dict):
        raise ConfigurationError("problem.params must be an object")
    allowed = family_keys(name)
    for key in user:
        if key not in allowed:
            raise _reject(key, allowed, "problem.params.")
    params.update(user)

    from .model import builtin_registry
    spec = builtin_registry(name, params)
    g = dict(doc.get("grids", {}))
    box = case.get("box", spec.state_box)
    grids = {"n_steps": g.get("n_steps", case.get("n_steps", 100)),
             "n_space": g.get("n_space", case.get("n_space", 100)),
             "x_min": float(g.get("x_min", box[0])), "x_max": float(g.get("x_max", box[1])),
             "x0": g.get("x0")}
    _positive_int(grids["n_steps"], "grids.n_steps")
    _positive_int(grids["n_space"], "grids.n_space")
    if grids["n_space"] < 3:
        raise ConfigurationError("grids.n_space must be >= 3")
    if not grids["x_min"] < grids["x_max"]:
        raise ConfigurationError("grids.x_min must be < grids.x_max")

    mode = doc.get("mode")
    if mode is not None and mode not in MODES:
        raise _reject(mode, MODES, "mode=")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigurationError("seed must be a nonnegative integer")
    threads = _positive_int(doc.get("threads", 1), "threads")
    out_dir = doc.get("output_dir", "out")
    scheme = {"cfl_margin": 0.05, "boundary": "reflecting", **doc.get("scheme", {})}
    options = {sec: dict(doc.get(sec, {})) for sec in
               ("simulate", "cross_validate", "dpp", "verify", "assumptions")}
    for sec, key in (("simulate", "n_paths"), ("cross_validate", "refine"), ("dpp", "rules"),
                     ("assumptions", "sample_count")):
        if key in options[sec]:
            _positive_int(options[sec][key], f"{sec}.{key}")
    cfg = RunConfig(problem=name, params=params, grids=grids, mode=mode, output_dir=out_dir,
                    seed=seed, threads=threads, policy=int(doc.get("policy", 0)),
                    tolerances=dict(doc.get("tolerances", {})), scheme=scheme, options=options)
    return cfg


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _spec(cfg: RunConfig):
    from .model import builtin_registry
    return builtin_registry(cfg.problem, cfg.params)


def _grids(cfg: RunConfig, spec=None):
    from .forward import TimeGrid, build_lattice
    from .pide import PIDEScheme, SpatialGrid
    spec = spec or _spec(cfg)
    g = cfg.grids
    grid = TimeGrid(0.0, spec.horizon_T, g["n_steps"])
    lat = build_lattice(spec, g["x_min"], g["x_max"], g["n_space"], grid, x0=g["x0"])
    scheme = PIDEScheme(grid, SpatialGrid(g["x_min"], g["x_max"], g["n_space"]),
                        float(cfg.scheme["cfl_margin"]), cfg.scheme["boundary"])
    return spec, lat, scheme


def _gnuplot(out: Path, csv_name: str, xcol: int, ycol: int, title: str) -> Path:
    p = out / (Path(csv_name).stem + ".gp")
    p.write_text(
        "set datafile separator ','\n"
        f"set title '{title}'\n"
        "set key autotitle columnhead\n"
        f"plot '{csv_name}' every ::1 using {xcol}:{ycol} with points pt 7 ps 0.3\n")
    return p


def plan(cfg: RunConfig, mode: str, refine: Optional[int], seeds) -> dict:
    steps = {
        "simulate": "Euler paths of the state under the configured control",
        "solve-bsde": "plain backward solve on the lattice",
        "solve-rbsde": "reflected backward solve on the lattice",
        "value": "controlled reflected backward induction (chain route)",
        "hjbvi": "explicit finite-difference HJBVI solve and viscosity residual",
        "cross-validate": "chain vs finite-difference refinement ladder",
        "dpp-check": "weak DPP equality on random grid stopping rules",
        "verify": "theorem property suites with injected-violation twins",
        "check-assumptions": "sampled check of the standing assumptions",
    }
    p = {"mode": mode, "action": steps[mode], "output_dir": cfg.output_dir, "seed": cfg.seed,
         "threads": cfg.threads, "problem": cfg.problem, "params": cfg.params,
         "grids": cfg.grids}
    if mode == "cross-validate":
        p["refine"] = refine
    if mode == "verify":
        p["seeds"] = seeds
        for key in ("problem", "params", "grids"):
            p.pop(key)
    return p


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def run(cfg: Optional[RunConfig], mode: Optional[str] = None, *, dry_run: bool = False,
        emit_gnuplot: bool = False, refine: Optional[int] = None, seeds=None) -> int:
    """Execute one subcommand; returns the exit code."""
    mode = mode or (cfg.mode if cfg else None)
    if mode not in MODES:
        print(f"error: unknown mode {mode!r}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        if cfg is None:
            if mode != "verify":
                raise ConfigurationError(f"{mode} needs --config")
            cfg = RunConfig(problem="affine", params={}, grids={})
        refine = refine if refine is not None else int(cfg.options.get("cross_validate", {})
                                                       .get("refine", 3))
        if refine < 1:
            raise ConfigurationError("--refine must be >= 1")
        if seeds is None:
            seeds = parse_seeds(cfg.options.get("verify", {}).get("seeds", [cfg.seed]))
        if dry_run:
            print(json.dumps(plan(cfg, mode, refine, seeds), indent=2, sort_keys=True))
            return EXIT_OK
        out = Path(cfg.output_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigurationError(f"output_dir {out} is not writable: {exc}") from None
        return _DISPATCH[mode](cfg, out, emit_gnuplot, refine, seeds)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SchemeError as exc:
        extra = (f" (max admissible dt {exc.max_dt:.6g})"
                 if exc.max_dt and "max admissible" not in str(exc) else "")
        print(f"scheme error: {exc}{extra}", file=sys.stderr)
        return EXIT_SCHEME


def _x0_str(lat) -> str:
    return f"{lat.x0:.6g}"


def _cmd_simulate(cfg, out, gp, refine, seeds):
    from .forward import simulate_paths
    spec, lat, _ = _grids(cfg)
    n_paths = int(cfg.options["simulate"].get("n_paths", 1000))
    a = float(spec.controls.array[cfg.policy])
    batch = simulate_paths(spec, lambda k, x: a, lat.x0, lat.times, n_paths, seed=cfg.seed,
                           threads=cfg.threads)
    batch.to_csv(out / "paths.csv")
    if gp:
        _gnuplot(out, "paths.csv", 2, 3, "sample paths")
    print(f"simulate: {n_paths} paths, mean X_T = {float(np.mean(batch.states[:, -1])):.10g}")
    return EXIT_OK


def _policy(cfg, lat):
    from .bsde import Policy
    if not 0 <= cfg.policy < lat.n_controls:
        raise ConfigurationError(f"policy index {cfg.policy} outside the control grid")
    return Policy.constant(lat, cfg.policy)


def _cmd_solve_bsde(cfg, out, gp, refine, seeds):
    from .bsde import solve_bsde
    spec, lat, _ = _grids(cfg)
    fld = solve_bsde(lat, _policy(cfg, lat))
    fld.to_csv(out / "bsde_field.csv")
    if gp:
        _gnuplot(out, "bsde_field.csv", 2, 3, "Y")
    print(f"solve-bsde: Y(0, x0={_x0_str(lat)}) = {fld.Y[0, lat.x0_index]:.12g}")
    return EXIT_OK


def _cmd_solve_rbsde(cfg, out, gp, refine, seeds):
    from .bsde import solve_rbsde
    spec, lat, _ = _grids(cfg)
    fld = solve_rbsde(lat, _policy(cfg, lat))
    fld.to_csv(out / "rbsde_field.csv")
    if gp:
        _gnuplot(out, "rbsde_field.csv", 2, 3, "Y (reflected)")
    print(f"solve-rbsde: Y(0, x0={_x0_str(lat)}) = {fld.Y[0, lat.x0_index]:.12g}")
    return EXIT_OK


def _cmd_value(cfg, out, gp, refine, seeds):
    from .control import solve_value
    spec, lat, _ = _grids(cfg)
    surf = solve_value(lat)
    surf.to_csv(out / "value_surface.csv")
    if gp:
        _gnuplot(out, "value_surface.csv", 2, 3, "u")
    print(f"value: u(0, x0={_x0_str(lat)}) = {surf.u[0, lat.x0_index]:.12g}")
    return EXIT_OK


def _cmd_hjbvi(cfg, out, gp, refine, seeds):
    from .pide import solve_hjbvi, viscosity_residual
    spec, lat, scheme = _grids(cfg)
    surf, branch = solve_hjbvi(spec, scheme, with_branch=True)
    surf.to_csv(out / "hjbvi_surface.csv", branch=branch)
    rep = viscosity_residual(surf, spec, scheme, tol=cfg.tolerances.get("residual"))
    (out / "residual.json").write_text(rep.to_json() + "\n")
    if gp:
        _gnuplot(out, "hjbvi_surface.csv", 2, 3, "u (HJBVI)")
    print(f"hjbvi: u(0, x0={_x0_str(lat)}) = {surf.u[0, lat.x0_index]:.12g}, "
          f"residual max {rep.max_abs:.4g} (tol {rep.tol:.4g})")
    return EXIT_OK if rep.passed else EXIT_FAILED


def _cmd_cross(cfg, out, gp, refine, seeds):
    from .pide import cross_validate
    spec, lat, scheme = _grids(cfg)
    opt = cfg.options["cross_validate"]
    rep = cross_validate(spec, lat, scheme, refine=refine, band=float(opt.get("band", 0.1)),
                         space_factor=int(opt.get("space_factor", 1)),
                         exclude=opt.get("exclude"))
    if "cross" in cfg.tolerances:
        rep.tol = float(cfg.tolerances["cross"])
    rep.to_csv(out / "convergence.csv")
    (out / "cross_report.json").write_text(rep.to_json() + "\n")
    if gp:
        p = out / "convergence.gp"
        p.write_text("set datafile separator ','\nset logscale xy\nset key autotitle columnhead\n"
                     "plot 'convergence.csv' every ::1 using 3:5 with linespoints\n")
    status = "pass" if rep.passed else "FAIL"
    print(f"cross-validate: {len(rep.rows)} rungs, final error {rep.errors[-1]:.4g} "
          f"(tol {rep.tol:.4g}), {status}")
    return EXIT_OK if rep.passed else EXIT_FAILED


def _cmd_dpp(cfg, out, gp, refine, seeds):
    from .control import dpp_check, random_stopping_rule, solve_value
    spec, lat, _ = _grids(cfg)
    opt = cfg.options["dpp"]
    rng = np.random.default_rng(cfg.seed)
    surf = solve_value(lat)
    reps = [dpp_check(lat, random_stopping_rule(lat, rng, float(opt.get("stop_probability", 0.3))),
                      surface=surf) for _ in range(int(opt.get("rules", 10)))]
    tol = float(cfg.tolerances.get("dpp", 1e-10))
    for r in reps:
        r.tol = tol
    (out / "dpp_report.json").write_text(
        json.dumps([r.to_dict() for r in reps], indent=2, sort_keys=True) + "\n")
    n_ok = sum(r.passed for r in reps)
    print(f"dpp-check: {n_ok}/{len(reps)} rules pass, max gap "
          f"{max(max(abs(r.sub_gap), abs(r.super_gap)) for r in reps):.3g}")
    return EXIT_OK if n_ok == len(reps) else EXIT_FAILED


def _cmd_verify(cfg, out, gp, refine, seeds):
    from .verify import run_corpus, write_reports
    reports = run_corpus(seeds, threads=cfg.threads)
    write_reports(reports, out)
    n_ok = sum(r.ok for r in reports)
    print(f"verify: {n_ok}/{len(reports)} reports ok over {len(seeds)} seeds")
    return EXIT_OK if n_ok == len(reports) else EXIT_FAILED


def _cmd_assumptions(cfg, out, gp, refine, seeds):
    from .model import check_assumptions
    spec = _spec(cfg)
    n = int(cfg.options["assumptions"].get("sample_count", 10_000))
    rep = check_assumptions(spec, n, cfg.seed)
    (out / "assumptions.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True)
                                          + "\n")
    status = "pass" if rep.passed else "FAIL: " + ", ".join(rep.failures)
    print(f"check-assumptions: {n} samples, {status}")
    return EXIT_OK if rep.passed else EXIT_FAILED


_DISPATCH = {
    "simulate": _cmd_simulate, "solve-bsde": _cmd_solve_bsde, "solve-rbsde": _cmd_solve_rbsde,
    "value": _cmd_value, "hjbvi": _cmd_hjbvi, "cross-validate": _cmd_cross,
    "dpp-check": _cmd_dpp, "verify": _cmd_verify, "check-assumptions": _cmd_assumptions,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcss", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        sp = sub.add_parser(mode, aliases=["solve"] if mode == "value" else [])
        sp.add_argument("--config", help="JSON config path, or - for stdin")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--refine", type=int, help="refinement ladder rungs")
        sp.add_argument("--dry-run", action="store_true")
        sp.add_argument("--emit-gnuplot", action="store_true")
        if mode == "verify":
            sp.add_argument("--seeds", help="seed list, e.g. 1..20")
    return ap


def _setup_logging() -> None:
    level = os.environ.get("MCSS_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.mode == "solve":
        args.mode = "value"
    try:
        cfg = parse_config(args.config) if args.config else None
        if cfg is not None:
            if args.seed is not None:
                cfg.seed = args.seed
            if args.threads is not None:
                cfg.threads = _positive_int(args.threads, "--threads")
            if args.out:
                cfg.output_dir = args.out
        elif args.mode == "verify":
            cfg = RunConfig(problem="affine", params={}, grids={}, seed=args.seed or 0,
                            threads=args.threads or 1, output_dir=args.out or "out")
        seeds = None
        if getattr(args, "seeds", None):
            seeds = parse_seeds(args.seeds)
        elif args.mode == "verify" and args.seed is not None:
            seeds = [args.seed]
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return run(cfg, args.mode, dry_run=args.dry_run, emit_gnuplot=args.emit_gnuplot,
               refine=args.refine, seeds=seeds)


if __name__ == "__main__":
    sys.exit(main())
