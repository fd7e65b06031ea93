"""
Command-line entry point.

    storagegame run --feeder feeder12.txt --fleet fleet12.csv --scenario scenario1_12.json \
        --mode weighted --horizon 2000 --trajectory traj.csv --metrics metrics.txt
    storagegame tune --fleet fleet33.csv --scenario random_33.json
    storagegame solve-step --feeder feeder12.txt --fleet fleet12.csv \
        --scenario random_12.json --seed 1 --compare --trace trace.csv
    storagegame validate-feeder --feeder feeder33.txt --scenario random_33.json

File arguments that do not exist as given are looked up among the shipped
data files. Options may also come from ``--config FILE`` holding
``key=value`` lines (keys are option names); explicit flags win.
"""

import argparse
import json
import sys
from dataclasses import dataclass
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import __version__
from .controller import MODES, assemble_step, solve_centralized
from .dualnet import SCHEDULES, DualConfig, format_trace, solve_distributed
from .errors import (AssumptionError, DegenerateEnvelopeError, DivergenceError, FeederParseError,
                     InfeasibleStepError, NotConvergedError, SoCViolationError, StorageGameError,
                     TopologyError, TraceParseError, ValidationError)
from .grid import _sweep, build_sensitivities, ldf_voltages, load_feeder
from .market import (RandomConfig, SyntheticConfig, TraceScenario, WorldBounds, load_traces,
                     repeat_hourly)
from .sim import (format_trajectory, random_world, run, suboptimality_report, synthetic_world,
                  trace_world)
from .storage import FleetState, fleet_envelopes, initial_state, load_fleet, tune_fleet

EXIT_OK = 0
EXIT_USAGE = 2       # argparse's own code for bad flags
EXIT_MISSING = 3     # a referenced file does not exist
EXIT_INVALID = 4     # a file or option failed validation
EXIT_NUMERIC = 5     # infeasible step, SoC violation or non-convergence
EXIT_CHECK = 6       # a requested check ran and failed

LDF_LIMIT = 0.005    # pu, accepted LDF-vs-AC voltage discrepancy


class MissingFileError(StorageGameError, FileNotFoundError):
    pass


class CheckFailed(StorageGameError):
    pass


@dataclass
class RunConfig:
    feeder: Path
    fleet: Path
    scenario: Path
    mode: str = "weighted"
    solver: str = "centralized"
    horizon: int = 2000
    seed: int = None
    convention: str = "proof"
    dual_tol: float = 1e-11
    dual_max_iters: int = 2000
    dual_schedule: str = "newton"
    trajectory: Path = None
    metrics: Path = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.solver not in ("centralized", "distributed"):
            raise ValidationError(f"unknown solver {self.solver!r}")
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")

    def dual_config(self):
        return DualConfig(max_iters=self.dual_max_iters, tol=self.dual_tol,
                          schedule=self.dual_schedule, tree_seed=self.seed)


# -- file resolution and scenario loading ----------------------------------------


def resolve(path):
    """Return ``path`` if it exists, else the shipped data file of that name."""
    if path is None:
        return None
    p = Path(path)
    if p.exists():
        return p
    data = files("storagegame") / "data"
    shipped = data / p.name
    if shipped.is_file():
        return Path(str(shipped))
    # bare shipped names such as "scenario1" or "random_33"
    hits = sorted(f.name for f in data.iterdir()
                  if f.is_file() and (f.name.split(".")[0] == p.name
                                      or f.name.startswith(p.name + "_")))
    if len(hits) == 1:
        return Path(str(data / hits[0]))
    raise MissingFileError(f"file not found: {path}")


def _bounds_from_json(spec, n):
    def vec(key):
        v = np.asarray(spec[key], dtype=float)
        if v.shape != (n,):
            raise ValidationError(f"scenario field {key!r} needs {n} entries, got {v.size}")
        return v

    try:
        return WorldBounds(spec["c0"][0], spec["c0"][1], spec["cp"][0], spec["cp"][1],
                           spec["cr"][0], spec["cr"][1], vec("l_min"), vec("l_max"),
                           vec("q_min"), vec("q_max"))
    except KeyError as err:
        raise ValidationError(f"scenario is missing field {err.args[0]!r}") from None


def load_scenario(path, feeder, fleet):
    """Build a World from a scenario JSON file or a trace CSV.

    JSON ``kind`` is ``synthetic``, ``random`` or ``trace`` (with ``path``
    and an optional ``repeat`` factor for hourly traces).
    Returns (world, needs_seed).
    """
    path = resolve(path)
    if path.suffix.lower() == ".csv":
        ticks, bounds = load_traces(path)
        return trace_world(feeder, fleet, TraceScenario(ticks, bounds), path.stem), False
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path}: not valid JSON ({err.msg})") from None
    kind = spec.get("kind")
    n = feeder.n_bus
    if kind == "synthetic":
        keys = ("low", "high", "low_dwell", "high_dwell", "r_half_period")
        cfg = SyntheticConfig(np.asarray(spec["l"], dtype=float), np.asarray(spec["q"], dtype=float),
                              **{k: spec[k] for k in keys if k in spec})
        if cfg.l.shape != (n,):
            raise ValidationError(f"scenario loads have {cfg.l.size} entries for {n} buses")
        if spec.get("swapped", False):
            cfg = cfg.swapped()
        return synthetic_world(feeder, fleet, cfg, path.stem), False
    if kind == "random":
        cfg = RandomConfig(_bounds_from_json(spec, n), spec.get("cp_mode", "uniform"))
        return random_world(feeder, fleet, cfg, path.stem), True
    if kind == "trace":
        ticks, bounds = load_traces(resolve(path.parent / spec["path"]))
        ticks = repeat_hourly(ticks, int(spec.get("repeat", 1)))
        return trace_world(feeder, fleet, TraceScenario(ticks, bounds), path.stem), False
    raise ValidationError(f"{path}: unknown scenario kind {kind!r}")


def _load_world(args):
    feeder = load_feeder(resolve(args.feeder))
    fleet = load_fleet(resolve(args.fleet))
    world, needs_seed = load_scenario(args.scenario, feeder, fleet)
    if needs_seed and args.seed is None:
        raise ValidationError("random scenarios need an explicit --seed")
    return world


# -- subcommands ---------------------------------------------------------------------


def cmd_run(args, out):
    cfg = RunConfig(args.feeder, args.fleet, args.scenario, args.mode, args.solver, args.horizon,
                    args.seed, args.convention, args.dual_tol, args.dual_max_iters,
                    args.dual_schedule, args.trajectory, args.metrics)
    world = _load_world(args)
    metrics, records = run(world, cfg.mode, cfg.solver, cfg.horizon,
                           0 if cfg.seed is None else cfg.seed, cfg.convention, cfg.dual_config())
    text = metrics.as_text()
    if cfg.trajectory is not None:
        Path(cfg.trajectory).write_text(format_trajectory(records), encoding="utf-8")
    if cfg.metrics is not None:
        Path(cfg.metrics).write_text(text, encoding="utf-8")
    out.write(text)
    return EXIT_OK


def cmd_tune(args, out):
    fleet = load_fleet(resolve(args.fleet))
    feeder_n = len(fleet)
    path = resolve(args.scenario)
    if path.suffix.lower() == ".csv":
        _, bounds = load_traces(path)
    else:
        spec = json.loads(path.read_text(encoding="utf-8"))
        if spec.get("kind") == "synthetic":
            cfg = SyntheticConfig(spec["l"], spec["q"], **{k: spec[k] for k in (
                "low", "high", "low_dwell", "high_dwell", "r_half_period") if k in spec})
            bounds = cfg.bounds()
        else:
            bounds = RandomConfig(_bounds_from_json(spec, feeder_n), spec.get("cp_mode", "uniform")).bounds
    params = tune_fleet(fleet, bounds, "weighted", args.convention)
    common = tune_fleet(fleet, bounds, "nonweighted", args.convention)
    out.write("unit,label,g_lo,g_hi,delta,w,gamma,k,w_common,gamma_common\n")
    for u, p, c in zip(fleet, params, common):
        out.write(",".join([str(u.bus), u.label] + [repr(float(v)) for v in (
            p.g_lo, p.g_hi, p.delta, p.w, p.gamma, p.k, c.w, c.gamma)]) + "\n")
    env = fleet_envelopes(bounds, args.convention)
    k_star, k_prime, dist = suboptimality_report(fleet, env, bounds.cp_min)
    out.write(f"K_star={k_star!r}\nK_prime={k_prime!r}\ndistance_bound={dist!r}\n")
    return EXIT_OK


def cmd_solve_step(args, out):
    world = _load_world(args)
    fleet = world.fleet
    tick = world.tick(args.period, 0 if args.seed is None else args.seed)
    params = None if args.mode == "greedy" else tune_fleet(
        fleet, world.bounds, "nonweighted" if args.mode == "nonweighted" else "weighted",
        args.convention)
    state = initial_state(fleet, params)
    if args.soc is not None:
        frac = float(args.soc)
        if not 0.0 <= frac <= 1.0:
            raise ValidationError("--soc is a fraction of capacity in [0, 1]")
        s = fleet.s_min + frac * (fleet.s_max - fleet.s_min)
        state = FleetState(s, state.gamma)
    problem = assemble_step(state, tick, params, args.mode, fleet, world.sens, world.feeder)
    central = solve_centralized(problem)
    config = DualConfig(max_iters=args.dual_max_iters, tol=args.dual_tol,
                        schedule=args.dual_schedule, tree_seed=args.seed, raise_on_failure=False)
    dist, trace = solve_distributed(problem, config)
    if args.trace is not None:
        Path(args.trace).write_text(format_trace(trace), encoding="utf-8")
    out.write(f"period={args.period}\nr={tick.r}\n")
    out.write("b_centralized=" + ",".join(repr(float(v)) for v in central.b) + "\n")
    out.write("b_distributed=" + ",".join(repr(float(v)) for v in dist.b) + "\n")
    out.write(f"objective_centralized={central.objective!r}\n")
    out.write(f"dual_iterations={len(trace)}\ndual_residual={dist.kkt_residual!r}\n")
    gap = float(np.max(np.abs(dist.b - central.b)))
    out.write(f"max_abs_difference={gap!r}\n")
    if dist.kkt_residual > config.tol:
        raise NotConvergedError(f"distributed solver stopped at residual {dist.kkt_residual:.3e}")
    if args.compare and not gap <= args.compare_tol:
        raise CheckFailed(f"solvers differ by {gap:.3e} > {args.compare_tol:.1e}")
    return EXIT_OK


def cmd_validate_feeder(args, out):
    feeder = load_feeder(resolve(args.feeder))
    S = build_sensitivities(feeder)
    n = feeder.n_bus
    if args.scenario is not None:
        path = resolve(args.scenario)
        spec = json.loads(path.read_text(encoding="utf-8"))
        if spec.get("kind") == "synthetic":
            l, q = np.asarray(spec["l"], dtype=float), np.asarray(spec["q"], dtype=float)
        else:
            l, q = np.asarray(spec["l_max"], dtype=float), np.asarray(spec["q_max"], dtype=float)
        if l.shape != (n,):
            raise ValidationError(f"scenario loads have {l.size} entries for {n} buses")
    else:
        l, q = np.zeros(n), np.zeros(n)
    l, q = args.load_scale * l, args.load_scale * q
    ac = _sweep(feeder, l, q)
    v_ldf = ldf_voltages(S, l, q, feeder.v0)
    err = float(np.max(np.abs(np.sqrt(v_ldf) - np.sqrt(ac["v"]))))
    out.write(f"buses={n}\nsweep_iterations={ac['iterations']}\n")
    out.write(f"min_v_ac={float(np.sqrt(ac['v'].min()))!r}\n")
    out.write(f"min_v_ldf={float(np.sqrt(v_ldf.min()))!r}\n")
    out.write(f"max_abs_error_pu={err!r}\nlimit_pu={LDF_LIMIT!r}\n")
    if not err < LDF_LIMIT:
        raise CheckFailed(f"LDF error {err:.4g} pu exceeds {LDF_LIMIT} pu")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------


def read_config(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path} line {lineno}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _add_world(p, scenario_required=True):
    p.add_argument("--feeder", help="feeder file")
    p.add_argument("--fleet", help="fleet CSV")
    p.add_argument("--scenario", required=False, help="scenario JSON or trace CSV")
    p.add_argument("--seed", type=int, help="seed for random scenarios (required for them)")
    p.add_argument("--convention", choices=("proof", "statement"), default="proof",
                   help="price envelope convention")


def _add_dual(p):
    p.add_argument("--dual-tol", type=float, default=1e-11)
    p.add_argument("--dual-max-iters", type=int, default=2000)
    p.add_argument("--dual-schedule", choices=SCHEDULES, default="newton")


def build_parser():
    parser = argparse.ArgumentParser(prog="storagegame",
                                     description="Storage charging game on a radial feeder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a policy over a horizon")
    p.add_argument("--config", help="key=value file with defaults for these options")
    _add_world(p)
    p.add_argument("--mode", choices=MODES, default="weighted")
    p.add_argument("--solver", choices=("centralized", "distributed"), default="centralized")
    p.add_argument("--horizon", type=int, default=2000)
    p.add_argument("--trajectory", help="write the trajectory CSV here")
    p.add_argument("--metrics", help="write the metrics block here")
    _add_dual(p)
    p.set_defaults(func=cmd_run, needs=("feeder", "fleet", "scenario"))

    p = sub.add_parser("tune", help="print tuned parameters and suboptimality gaps")
    p.add_argument("--config")
    p.add_argument("--fleet")
    p.add_argument("--scenario")
    p.add_argument("--convention", choices=("proof", "statement"), default="proof")
    p.set_defaults(func=cmd_tune, needs=("fleet", "scenario"))

    p = sub.add_parser("solve-step", help="solve one period with both solvers")
    p.add_argument("--config")
    _add_world(p)
    p.add_argument("--mode", choices=MODES, default="weighted")
    p.add_argument("--period", type=int, default=0)
    p.add_argument("--soc", type=float, help="SoC as a fraction of capacity (default: s_min)")
    p.add_argument("--compare", action="store_true", help="fail unless the solvers agree")
    p.add_argument("--compare-tol", type=float, default=1e-6)
    p.add_argument("--trace", help="write the dual iteration trace CSV here")
    _add_dual(p)
    p.set_defaults(func=cmd_solve_step, needs=("feeder", "fleet", "scenario"))

    p = sub.add_parser("validate-feeder", help="compare the linear model with the AC sweep")
    p.add_argument("--config")
    p.add_argument("--feeder")
    p.add_argument("--scenario", help="take nominal loads from this scenario (default: no load)")
    p.add_argument("--load-scale", type=float, default=1.0)
    p.set_defaults(func=cmd_validate_feeder, needs=("feeder",))
    return parser


def _apply_config(parser, args, argv):
    if getattr(args, "config", None) is None:
        return args
    values = read_config(resolve(args.config))
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        if key not in known or key in ("help", "config"):
            raise ValidationError(f"unknown config key {key!r}")
        action = known[key]
        if action.nargs == 0:
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(value) if action.type else value
            if action.choices and defaults[key] not in action.choices:
                raise ValidationError(f"config key {key!r}: invalid choice {value!r}")
    sub.set_defaults(**defaults)
    # re-parse so explicit flags override the file
    return parser.parse_args(argv)


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    try:
        args = _apply_config(parser, args, argv)
        missing = [k for k in args.needs if getattr(args, k) is None]
        if missing:
            parser.error("missing required option(s): " + ", ".join("--" + m for m in missing))
        return args.func(args, out)
    except (MissingFileError, FileNotFoundError) as err:
        return _fail(EXIT_MISSING, err)
    except (FeederParseError, TraceParseError, TopologyError, ValidationError, AssumptionError,
            DegenerateEnvelopeError) as err:
        return _fail(EXIT_INVALID, err)
    except (InfeasibleStepError, SoCViolationError, NotConvergedError, DivergenceError) as err:
        return _fail(EXIT_NUMERIC, err)
    except CheckFailed as err:
        return _fail(EXIT_CHECK, err)


def _fail(code, err):
    sys.stderr.write(f"storagegame: {err}\n")
    return code


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
