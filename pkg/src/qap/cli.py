"""Command line front end: ``qap <scenario> --config <path>``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure
(caustic, non-convergence, ...). A summary is written for exit code 3.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import CoefficientState, evolve
from .errors import CausticError, InputError, NumericalError, SingularityError, ValidationError
from .functional import build_slices, endpoint_probability, lambda_discrete, residual_convergence
from .model import PhysicalParams, PolynomialField, PotentialSchedule, TimeGrid, harmonic_field, linear_field, validate_model
from .report import ArtifactWriter, RunSummary, dumps
from .stationary import (
    SweepRow,
    classical_limit_sweep,
    find_stationary,
    predict_endpoint,
    probe_grid_crosscheck,
    probe_sensitivity,
    Scenario,
)

SCENARIOS = ("evolve", "correspondence", "probability", "stationary", "classical-limit",
             "trajectory", "probe")

TOP_KEYS = {"scenario", "params", "potential", "grid", "steps", "initial", "options",
            "output_dir", "tolerances", "seed"}
PARAM_KEYS = {"mass", "hbar", "dimension"}
GRID_KEYS = {"T", "N"}
INITIAL_KEYS = {"s1", "s2", "rho0", "rho1", "rho2"}
TOL_KEYS = {"grad_tol", "fd_step", "alpha_step"}
SEGMENT_KEYS = {"t", "c0", "c1", "c2"}
POTENTIAL_KEYS = {
    "free": {"kind"},
    "linear": {"kind", "alpha"},
    "harmonic": {"kind", "omega"},
    "polynomial": {"kind", "segments"},
}
OPTION_DEFAULTS = {
    "evolve": {"x0": 0.0, "xT": 0.0},
    "correspondence": {"N_list": [8, 16, 32, 64], "samples": 100, "low": -2.0, "high": 2.0},
    "probability": {"delta0": 1.0, "deltaT": 1.0, "x0": 0.0, "xT": 0.0, "dense_check": True},
    "stationary": {"x0": 0.0, "xT": 1.0, "block": "phase"},
    "classical-limit": {"hbar_list": [1.0, 0.5, 0.25, 0.125, 0.0625], "x0": 0.0, "xT": 1.0,
                        "block": "phase"},
    "trajectory": {"x0": 0.0, "p0": 1.0, "bracket": [-5.0, 5.0], "block": "phase"},
    "probe": {"probe": {"c0": 0.0, "c1": [0.0], "c2": [[0.0]]}, "mode": "at_stationary",
              "x0": 0.0, "xT": 1.0, "crosscheck": False},
}
TOL_DEFAULTS = {"grad_tol": 1e-7, "fd_step": 1e-5, "alpha_step": 1e-2}
SAMPLING = {"correspondence"}


class ConfigError(InputError):
    pass


def _strict(section: str, data, allowed: set):
    if not isinstance(data, dict):
        raise ConfigError(f"'{section}' must be an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        where = f" in '{section}'" if section else ""
        raise ConfigError(f"unknown config key{'s' if len(unknown) > 1 else ''}{where}: "
                          + ", ".join(repr(k) for k in unknown))


def _num(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"'{name}' must be a number")
    return float(v)


def _numlist(v, name):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    if isinstance(v, list):
        return [_numlist(x, name) for x in v]
    raise ConfigError(f"'{name}' must be a number or nested list of numbers")


@dataclass
class RunConfig:
    """A validated configuration; ``normalized`` is the canonical JSON view."""

    scenario: str
    normalized: dict
    output_dir: str

    @property
    def options(self) -> dict:
        return self.normalized["options"]

    @property
    def tolerances(self) -> dict:
        return self.normalized["tolerances"]

    @property
    def seed(self):
        return self.normalized["seed"]

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(dumps(self.normalized).encode()).hexdigest()

    def params(self, hbar: float | None = None) -> PhysicalParams:
        p = self.normalized["params"]
        return PhysicalParams(p["mass"], p["hbar"] if hbar is None else hbar, p["dimension"])

    def grid(self) -> TimeGrid:
        g = self.normalized["grid"]
        return TimeGrid(g["T"], g["N"])

    def potential(self) -> PotentialSchedule:
        spec = self.normalized["potential"]
        p = self.normalized["params"]
        D = p["dimension"]
        kind = spec["kind"]
        if kind == "free":
            return PotentialSchedule.constant(PolynomialField.zero(D))
        if kind == "linear":
            return PotentialSchedule.constant(linear_field(spec["alpha"], D))
        if kind == "harmonic":
            return PotentialSchedule.constant(harmonic_field(spec["omega"], p["mass"], D))
        segs = []
        for s in spec["segments"]:
            segs.append((s["t"], PolynomialField.from_series(s["c0"], s["c1"], s["c2"], dimension=D)))
        return PotentialSchedule(tuple(segs))

    def classical_scenario(self):
        spec = self.normalized["potential"]
        if spec["kind"] == "polynomial" or self.normalized["params"]["dimension"] != 1:
            return None
        return Scenario(spec["kind"], self.normalized["params"]["mass"],
                        omega=spec.get("omega", 1.0), alpha=float(np.ravel(spec.get("alpha", 0.0))[0]))

    def initial(self) -> CoefficientState:
        i = self.normalized["initial"]
        return CoefficientState.make(s1=i["s1"], s2=i["s2"], rho0=i["rho0"], rho1=i["rho1"],
                                     rho2=i["rho2"], dimension=self.normalized["params"]["dimension"])


def load_config(raw: dict, scenario: str | None = None, seed=None, out=None) -> RunConfig:
    """Validate and normalize a raw configuration mapping.

    Unknown keys anywhere in the schema raise ConfigError naming the key.
    """
    _strict("", raw, TOP_KEYS)
    name = raw.get("scenario", scenario)
    if scenario is not None and name != scenario:
        raise ConfigError(f"config scenario {name!r} does not match subcommand {scenario!r}")
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIOS)}")

    params = raw.get("params", {})
    _strict("params", params, PARAM_KEYS)
    dim = params.get("dimension", 1)
    if isinstance(dim, bool) or not isinstance(dim, int):
        raise ConfigError("'params.dimension' must be an integer")
    norm_params = {"mass": _num(params.get("mass", 1.0), "mass"),
                   "hbar": _num(params.get("hbar", 1.0), "hbar"), "dimension": dim}

    pot = raw.get("potential", {"kind": "free"})
    if not isinstance(pot, dict) or pot.get("kind") not in POTENTIAL_KEYS:
        raise ConfigError("'potential.kind' must be one of free, linear, harmonic, polynomial")
    _strict("potential", pot, POTENTIAL_KEYS[pot["kind"]])
    norm_pot = {"kind": pot["kind"]}
    if pot["kind"] == "linear":
        norm_pot["alpha"] = _numlist(pot.get("alpha", 0.0), "alpha")
    elif pot["kind"] == "harmonic":
        norm_pot["omega"] = _num(pot.get("omega", 1.0), "omega")
    elif pot["kind"] == "polynomial":
        segs = pot.get("segments")
        if not isinstance(segs, list) or not segs:
            raise ConfigError("'potential.segments' must be a non-empty list")
        norm_pot["segments"] = []
        for k, s in enumerate(segs):
            _strict(f"potential.segments[{k}]", s, SEGMENT_KEYS)
            norm_pot["segments"].append({
                "t": _num(s.get("t", 0.0), "t"),
                "c0": _num(s.get("c0", 0.0), "c0"),
                "c1": _numlist(s.get("c1", [0.0] * dim), "c1"),
                "c2": _numlist(s.get("c2", [[0.0] * dim] * dim), "c2"),
            })

    grid = raw.get("grid", {})
    _strict("grid", grid, GRID_KEYS)
    N = grid.get("N", 8)
    if isinstance(N, bool) or not isinstance(N, int):
        raise ConfigError("'grid.N' must be an integer")
    norm_grid = {"T": _num(grid.get("T", 1.0), "T"), "N": N}

    steps = raw.get("steps", 4096)
    if isinstance(steps, bool) or not isinstance(steps, int) or steps < 8:
        raise ConfigError("'steps' must be an integer >= 8")

    init = raw.get("initial", {})
    _strict("initial", init, INITIAL_KEYS)
    norm_init = {k: _numlist(init.get(k, 0.0), k) for k in sorted(INITIAL_KEYS)}

    opts = raw.get("options", {})
    defaults = OPTION_DEFAULTS[name]
    _strict("options", opts, set(defaults))
    norm_opts = copy.deepcopy(defaults)
    for k, v in opts.items():
        if isinstance(defaults[k], (bool, str, dict)):
            if type(v) is not type(defaults[k]):
                raise ConfigError(f"'options.{k}' has the wrong type")
            norm_opts[k] = v
        else:
            norm_opts[k] = _numlist(v, k)
    if name == "probe":
        _strict("options.probe", norm_opts["probe"], SEGMENT_KEYS - {"t"})
        norm_opts["probe"] = {k: _numlist(norm_opts["probe"].get(k, 0.0), k) for k in ("c0", "c1", "c2")}
    if name == "correspondence":
        norm_opts["N_list"] = [int(n) for n in norm_opts["N_list"]]
        norm_opts["samples"] = int(norm_opts["samples"])

    tols = raw.get("tolerances", {})
    _strict("tolerances", tols, TOL_KEYS)
    norm_tols = dict(TOL_DEFAULTS)
    for k, v in tols.items():
        norm_tols[k] = _num(v, k)
        if not norm_tols[k] > 0:
            raise ConfigError(f"tolerance '{k}' must be positive")

    if seed is None:
        seed = raw.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        raise ConfigError("'seed' must be a non-negative integer")
    if name in SAMPLING and seed is None:
        raise ConfigError(f"scenario {name!r} samples random paths and needs a seed")

    output_dir = out or raw.get("output_dir") or "qap_out"
    if not isinstance(output_dir, str):
        raise ConfigError("'output_dir' must be a string")

    normalized = {
        "scenario": name,
        "params": norm_params,
        "potential": norm_pot,
        "grid": norm_grid,
        "steps": steps,
        "initial": norm_init,
        "options": norm_opts,
        "tolerances": norm_tols,
        "seed": seed,
    }
    cfg = RunConfig(name, normalized, output_dir)
    validate_model(cfg.params(), cfg.potential(), cfg.grid())
    return cfg


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------

def _flow_rows(res):
    D = res.dimension
    header = ["t"] + [f"s1_{i}" for i in range(D)] + [f"s2_{i}{j}" for i in range(D) for j in range(D)]
    header += ["rho0"] + [f"rho1_{i}" for i in range(D)] + [f"rho2_{i}{j}" for i in range(D) for j in range(D)]
    header += ["f"]
    stride = max(1, res.steps // 256)
    rows = []
    for n in range(0, res.steps + 1, stride):
        rows.append([res.times[n], *res.s1[n], *res.s2[n].ravel(), res.rho0[n], *res.rho1[n],
                     *res.rho2[n].ravel(), res.f_samples[n]])
    return header, rows


def _run_evolve(cfg, out, head, notes, threads):
    o = cfg.options
    res = evolve(cfg.initial(), cfg.potential(), cfg.grid().T, cfg.params(), cfg.normalized["steps"],
                 x0=o["x0"], xT=o["xT"])
    notes.extend(res.warnings)
    head["lambda"] = res.lambda_
    head.update(defect=res.hermiticity_defect,
                defect_identity_residual=res.defect_identity_residual,
                integral_f=res.integral_f(), max_local_error=res.integrator_stats[1])
    out.write_csv("flow.csv", *_flow_rows(res))


def _run_correspondence(cfg, out, head, notes, threads):
    o = cfg.options
    params, pot = cfg.params(), cfg.potential()
    res = evolve(cfg.initial(), pot, cfg.grid().T, params, cfg.normalized["steps"])
    study = residual_convergence(res, params, pot, o["N_list"], samples=o["samples"],
                                 seed=cfg.seed, low=o["low"], high=o["high"], workers=threads)
    head.update(fitted_order=study.order, max_residual_last=study.max_residual[-1])
    out.write_csv("residuals.csv", ("N", "max_residual", "mean_residual"), study.rows())


def _run_probability(cfg, out, head, notes, threads):
    from .model import DiscretizationContext
    o = cfg.options
    params = cfg.params()
    res = evolve(cfg.initial(), cfg.potential(), cfg.grid().T, params, cfg.normalized["steps"])
    slices = build_slices(res, DiscretizationContext(cfg.grid(), params.hbar))
    value = endpoint_probability(slices, o["delta0"], o["deltaT"], o["x0"], o["xT"],
                                 verify=o["dense_check"])
    head.update(endpoint_probability=value, lambda_discrete=lambda_discrete(slices, o["x0"], o["xT"]))
    out.write_csv("probability.csv", ("delta0", "deltaT", "x0", "xT", "probability"),
                  [(o["delta0"], o["deltaT"], o["x0"], o["xT"], value)])


def _reference(cfg, x0, xT):
    sc = cfg.classical_scenario()
    if sc is None:
        return None
    return sc.reference(x0, xT, cfg.grid().T)


def _run_stationary(cfg, out, head, notes, threads):
    o, t = cfg.options, cfg.tolerances
    I_cl = _reference(cfg, o["x0"], o["xT"])
    res = find_stationary(o["x0"], o["xT"], cfg.grid().T, cfg.potential(), cfg.params(),
                          fd_step=t["fd_step"], tol=t["grad_tol"], block=o["block"],
                          steps=cfg.normalized["steps"], workers=threads)
    head.update(lambda0=res.lambda0, grad_norm=res.grad_norm, converged=bool(res.converged),
                iterations=res.iterations, multistart_index=res.multistart_index)
    if I_cl is not None:
        head["I_cl"] = I_cl
    out.write_csv("stationary.csv", ("component", "value"),
                  [(f"c{i}", v) for i, v in enumerate(res.c_star)])


def _run_classical_limit(cfg, out, head, notes, threads):
    o = cfg.options
    sc = cfg.classical_scenario()
    if sc is None:
        raise ConfigError("classical-limit needs a 1-D free, linear or harmonic potential")
    rows = classical_limit_sweep(o["hbar_list"], sc, o["x0"], o["xT"], cfg.grid().T,
                                 block=o["block"], steps=cfg.normalized["steps"])
    for r in rows:
        if not r.converged:
            notes.append(f"non-convergence at hbar = {r.hbar:g}")
    errs = [r.rel_error for r in rows]
    head.update(rows=len(rows), all_converged=all(r.converged for r in rows),
                strictly_decreasing=all(b < a for a, b in zip(errs, errs[1:])),
                last_rel_error=errs[-1] if errs else math.nan)
    out.write_csv("classical_limit.csv", SweepRow.HEADER, [r.as_tuple() for r in rows])


def _run_trajectory(cfg, out, head, notes, threads):
    o = cfg.options
    pred = predict_endpoint(o["x0"], o["p0"], cfg.grid().T, cfg.potential(), cfg.params(),
                            tuple(o["bracket"]), steps=cfg.normalized["steps"], block=o["block"])
    head.update(xT=pred.xT, pT=pred.pT, residual=pred.residual)
    out.write_csv("trajectory.csv", ("x0", "p0", "xT", "pT"), [(o["x0"], o["p0"], pred.xT, pred.pT)])


def _run_probe(cfg, out, head, notes, threads):
    o, t = cfg.options, cfg.tolerances
    D = cfg.normalized["params"]["dimension"]
    g = PolynomialField.from_series(o["probe"]["c0"], o["probe"]["c1"], o["probe"]["c2"], dimension=D)
    pot, params, T = cfg.potential(), cfg.params(), cfg.grid().T
    d = probe_sensitivity(g, t["alpha_step"], o["x0"], o["xT"], T, pot, params, mode=o["mode"],
                          steps=cfg.normalized["steps"])
    head["dlambda_dalpha"] = d
    rows = [("derivative", d)]
    if o["crosscheck"]:
        st = find_stationary(o["x0"], o["xT"], T, pot, params, steps=cfg.normalized["steps"])
        cc = probe_grid_crosscheck(g, st, o["x0"], T, pot, params)
        head["grid_crosscheck"] = cc
        rows.append(("grid_crosscheck", cc))
    out.write_csv("probe.csv", ("quantity", "value"), rows)


RUNNERS = {
    "evolve": _run_evolve,
    "correspondence": _run_correspondence,
    "probability": _run_probability,
    "stationary": _run_stationary,
    "classical-limit": _run_classical_limit,
    "trajectory": _run_trajectory,
    "probe": _run_probe,
}


def run_config(cfg: RunConfig, threads: int = 1) -> RunSummary:
    """Run one scenario, write its artifacts and ``summary.json``.

    Numerical failures are caught and recorded with exit code 3.
    """
    out = ArtifactWriter(cfg.output_dir)
    head: dict = {}
    notes: list = []
    start = time.perf_counter()
    code, error = 0, None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            RUNNERS[cfg.scenario](cfg, out, head, notes, threads)
        except NumericalError as err:
            code, error = 3, f"{type(err).__name__}: {err}"
            if isinstance(err, (CausticError, SingularityError)):
                notes.append(f"caustic: {err}")
            else:
                notes.append(str(err))
    notes.extend(str(w.message) for w in caught)
    out.write_text("config.normalized.json", dumps(cfg.normalized) + "\n")
    summary = RunSummary(cfg.scenario, cfg.config_hash, head, notes, out.files, code, error,
                         wall_clock=time.perf_counter() - start)
    out.write_summary(summary)
    return summary


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qap", description="Action-eigenvalue experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("scenario", choices=SCENARIOS)
    ap.add_argument("--config", required=True, help="JSON configuration file")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("--seed", type=int, help="random seed (overrides the config)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for sampling scenarios")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        cfg = load_config(raw, args.scenario, seed=args.seed, out=args.out)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except (OSError, json.JSONDecodeError) as err:
        print(f"qap: cannot read config: {err}", file=sys.stderr)
        return 2
    except (ValidationError, InputError) as err:
        print(f"qap: invalid config: {err}", file=sys.stderr)
        return 2
    try:
        summary = run_config(cfg, threads=args.threads)
    except InputError as err:
        print(f"qap: {err}", file=sys.stderr)
        return 2
    print(f"qap: {cfg.scenario} finished in {summary.wall_clock:.2f} s "
          f"(exit {summary.exit_code}); summary in {Path(cfg.output_dir) / 'summary.json'}",
          file=sys.stderr)
    if summary.error:
        print(f"qap: {summary.error}", file=sys.stderr)
    return summary.exit_code


if __name__ == "__main__":
    sys.exit(main())
