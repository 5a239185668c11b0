"""Command-line interface: ``relaxctrl {solve,verify,chatter,presets}``.

Exit codes: 0 ok / converged, 1 error, 2 not converged (or a failed verification).
Reports are JSON envelopes ``{"payload": ..., "metadata": ...}``; the payload is
deterministic for a fixed config and seed, timing lives in the metadata.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
import time
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from ._kernels import BACKEND
from .control_space import build_dictionary, make_grid
from .errors import ConfigError, RelaxCtrlError
from .optimizer import SolveOptions, solve_relaxed
from .pde import evaluate_cost, solve_forward
from .presets import PRESETS, get_preset
from .young_measures import chatter_time, dumps, refine_relaxed
from . import verify as _verify

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSpec(_Strict):
    dim: Literal[1, 2] = 1
    nx: int = Field(16, ge=2, le=4096)
    extent: float = Field(1.0, gt=0)
    nt: int = Field(20, ge=1, le=100000)
    T: float = Field(1.0, gt=0)


class DictionarySpec(_Strict):
    strategy: Literal["constants", "bang", "custom"] = "constants"
    count: int = Field(3, ge=1, le=1000)
    path: Optional[str] = None


class SolverSpec(_Strict):
    max_iters: int = Field(500, ge=0)
    mp_tolerance: float = Field(1e-6, gt=0)
    step_rule: Literal["auto", "exact", "armijo", "harmonic"] = "auto"
    method: Literal["blockwise", "pairwise", "vanilla"] = "blockwise"
    armijo_c1: float = Field(1e-4, gt=0, lt=1)
    armijo_shrink: float = Field(0.5, gt=0, lt=1)
    restarts: int = Field(0, ge=0, le=100)


class OutputSpec(_Strict):
    dir: str = "relaxctrl-out"


class ChatterSpec(_Strict):
    levels: list[int] = Field(default_factory=lambda: [2, 4, 8, 16])

    @model_validator(mode="after")
    def _positive(self):
        if not self.levels or any(k < 1 for k in self.levels):
            raise ValueError("chatter levels must be positive integers")
        return self


class VerifySpec(_Strict):
    gradient: bool = True
    gradient_eps: float = Field(1e-5, gt=0)
    gradient_tol: float = Field(1e-6, gt=0)
    maximum_principle: bool = True
    constancy: bool = True
    constancy_ratio: float = Field(2.0, gt=0)
    choquet_panel: bool = True
    witness: bool = True


class RunConfig(_Strict):
    preset: str
    params: dict[str, float] = Field(default_factory=dict)
    grid: Optional[GridSpec] = None
    structure: Literal["fine", "coarse"] = "fine"
    dictionary: Optional[DictionarySpec] = None
    solver: SolverSpec = Field(default_factory=SolverSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)
    chatter: ChatterSpec = Field(default_factory=ChatterSpec)
    verify: VerifySpec = Field(default_factory=VerifySpec)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _preset(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; available: {sorted(PRESETS)}")
        get_preset(self.preset).resolve(self.params)
        return self

    def resolved(self) -> dict:
        """Config with preset defaults filled in."""
        p = get_preset(self.preset)
        d = self.model_dump()
        d["params"] = p.resolve(self.params)
        d["grid"] = self.grid.model_dump() if self.grid else GridSpec(**_grid_defaults(p.grid)).model_dump()
        d["dictionary"] = self.dictionary.model_dump() if self.dictionary else DictionarySpec(**p.dictionary).model_dump()
        if "step_rule" in p.solver and "step_rule" not in self.solver.model_fields_set:
            d["solver"]["step_rule"] = p.solver["step_rule"]
        return d


def _grid_defaults(g: dict) -> dict:
    out = dict(g)
    if "extent" not in out:
        out["extent"] = 1.0
    return out


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def parse_config(path) -> RunConfig:
    """Load and validate a JSON run configuration (unknown keys are rejected)."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_error(e)) from None


# building blocks ------------------------------------------------------------------------

def _setup(config: RunConfig, seed: Optional[int] = None):
    r = config.resolved()
    seed = config.seed if seed is None else seed
    g = r["grid"]
    grid = make_grid(g["dim"], g["nx"], g["extent"], g["nt"], g["T"])
    problem = get_preset(config.preset).build(grid, **config.params)
    ds = r["dictionary"]
    if config.structure == "fine":
        options = build_dictionary(grid, problem.control_set, ds["strategy"], ds["count"], seed, ds["path"])
    else:
        options = problem.control_set.lattice(ds["count"])
    s = r["solver"]
    opts = SolveOptions(max_iters=s["max_iters"], mp_tolerance=s["mp_tolerance"], step_rule=s["step_rule"],
                        method=s["method"], armijo_c1=s["armijo_c1"], armijo_shrink=s["armijo_shrink"],
                        restarts=s["restarts"], seed=seed)
    r["seed"] = seed
    return problem, options, opts, r


def _metadata(t0: float) -> dict:
    return {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(), "wall_time": time.perf_counter() - t0,
            "backend": BACKEND, "version": __version__}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _out_dir(config: RunConfig, out: Optional[str]) -> Path:
    d = Path(out if out is not None else config.output.dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _finite(x):
    x = float(x)
    return x if np.isfinite(x) else None


# commands -------------------------------------------------------------------------------------

def run_solve(config: RunConfig, out: Optional[str] = None, seed: Optional[int] = None) -> int:
    t0 = time.perf_counter()
    d = _out_dir(config, out)
    problem, options, opts, resolved = _setup(config, seed)
    ctrl, y, chi, rep = solve_relaxed(problem, options, opts)
    payload = {"command": "solve", "config": resolved, "report": rep.to_dict(),
               "weights": np.asarray(ctrl.weights).tolist()}
    (d / "report.json").write_text(_dump({"payload": payload, "metadata": _metadata(t0)}))
    (d / "control.json").write_text(dumps(ctrl) + "\n")
    (d / "state.csv").write_text(y.to_csv())
    (d / "adjoint.csv").write_text(chi.to_csv())
    (d / "profiles.csv").write_text(rep.profiles_csv(problem.grid))
    print(f"{rep.termination}: cost {rep.final_cost:.10g}, max MP residual {rep.max_residual:.3e}, "
          f"{rep.iterations} iterations -> {d}")
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def run_verify(config: RunConfig, out: Optional[str] = None, seed: Optional[int] = None) -> int:
    t0 = time.perf_counter()
    d = _out_dir(config, out)
    problem, options, opts, resolved = _setup(config, seed)
    v = config.verify
    checks = []
    if config.structure != "fine" and (v.gradient or v.maximum_principle):
        raise ConfigError("verify runs the gradient and maximum-principle checks on fine relaxations only")
    if v.gradient:
        checks.append(_verify.check_gradient(problem, options, v.gradient_eps, v.gradient_tol, resolved["seed"]))
    if v.maximum_principle:
        checks.append(_verify.check_maximum_principle(problem, options, opts))
    if v.constancy:
        ds = {k: resolved["dictionary"][k] for k in ("strategy", "count", "path")}
        ds["seed"] = resolved["seed"]
        checks.append(_verify.check_constancy(problem, ds, opts, min_ratio=v.constancy_ratio))
    if v.choquet_panel:
        checks.append(_verify.check_choquet_panel())
    if v.witness:
        checks.append(_verify.check_witness())
    passed = all(c["passed"] for c in checks)
    payload = {"command": "verify", "config": resolved, "checks": _jsonable(checks), "passed": passed}
    (d / "verify.json").write_text(_dump({"payload": payload, "metadata": _metadata(t0)}))
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}: value {c['value']:.3e} "
              f"(tolerance {c['tolerance']:.1e})")
    return EXIT_OK if passed else EXIT_NOT_CONVERGED


def chatter_table(problem, mu, levels) -> tuple[float, list[dict]]:
    """Forward cost of chattered controls against the relaxed cost on the same refined grid."""
    relaxed = evaluate_cost(problem, solve_forward(problem, mu), mu)
    rows = []
    for k in levels:
        fine_problem = problem.with_grid(problem.grid.refine(time=k))
        ch = chatter_time(mu, k).as_relaxed()
        classical = evaluate_cost(fine_problem, solve_forward(fine_problem, ch), ch)
        ref = refine_relaxed(mu, k)
        relaxed_k = evaluate_cost(fine_problem, solve_forward(fine_problem, ref), ref)
        rows.append({"k": int(k), "classical_cost": classical, "relaxed_cost_refined": relaxed_k,
                     "gap": abs(classical - relaxed_k), "gap_to_optimum": abs(classical - relaxed)})
    return relaxed, rows


def run_chatter(config: RunConfig, levels=None, out: Optional[str] = None, seed: Optional[int] = None) -> int:
    t0 = time.perf_counter()
    d = _out_dir(config, out)
    if config.structure != "fine":
        raise ConfigError("chatter works on fine relaxed controls")
    problem, options, opts, resolved = _setup(config, seed)
    levels = list(levels) if levels is not None else list(config.chatter.levels)
    mu, _, _, rep = solve_relaxed(problem, options, opts)
    relaxed, rows = chatter_table(problem, mu, levels)
    payload = {"command": "chatter", "config": resolved, "relaxed_cost": relaxed,
               "relaxed_termination": rep.termination, "rows": rows}
    (d / "chatter.json").write_text(_dump({"payload": payload, "metadata": _metadata(t0)}))
    lines = ["k,classical_cost,relaxed_cost_refined,gap,gap_to_optimum"]
    lines += [f"{r['k']},{r['classical_cost']!r},{r['relaxed_cost_refined']!r},{r['gap']!r},{r['gap_to_optimum']!r}"
              for r in rows]
    (d / "chatter.csv").write_text("\n".join(lines) + "\n")
    for r in rows:
        print(f"k={r['k']:>4}  classical {r['classical_cost']:.6e}  gap {r['gap']:.3e}")
    return EXIT_OK


def list_presets() -> list[dict]:
    return [PRESETS[name].row() for name in sorted(PRESETS)]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _finite(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# entry point ------------------------------------------------------------------------------------

def _levels(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}") from None
    if not out or any(k < 1 for k in out):
        raise argparse.ArgumentTypeError("levels must be positive")
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relaxctrl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("solve", "solve a relaxed problem"), ("verify", "run the verification checks"),
                        ("chatter", "approximate the relaxed optimum by chattering controls")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, default=None, help="seed (overrides the config seed)")
        if name == "chatter":
            p.add_argument("--levels", type=_levels, default=None, help="refinement ladder, e.g. 2,4,8,16")
    p = sub.add_parser("presets", help="list problem presets")
    p.add_argument("--json", action="store_true", help="print the table as JSON")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            rows = list_presets()
            if args.json:
                print(json.dumps(rows, indent=1, sort_keys=True))
            else:
                keys = ("semi_monotone", "differentiable", "autonomous", "orientor_convex", "quadratic")
                print(f"{'name':<14}" + "".join(f"{k:>17}" for k in keys) + "  description")
                for r in rows:
                    print(f"{r['name']:<14}" + "".join(f"{str(r[k]):>17}" for k in keys) + f"  {r['description']}")
            return EXIT_OK
        config = parse_config(args.config)
        if args.command == "solve":
            return run_solve(config, args.out, args.seed)
        if args.command == "verify":
            return run_verify(config, args.out, args.seed)
        return run_chatter(config, args.levels, args.out, args.seed)
    except (RelaxCtrlError, ValueError, OSError) as e:
        print(f"relaxctrl: error: {e}", file=sys.stderr)
        return EXIT_ERROR
