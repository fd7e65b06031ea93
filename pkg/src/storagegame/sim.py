"""
Horizon simulation: tick -> per-period decision -> SoC update -> record,
with running cost averages and feasibility audits.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .controller import (SIGN_CONSTRAINED, aggregate_cost, assemble_step, per_user_cost,
                         solve_centralized, zero_forced)
from .dualnet import DualConfig, solve_distributed
from .errors import InfeasibleStepError
from .grid import build_sensitivities
from .market import RandomConfig, SyntheticConfig, scenario_random, scenario_synthetic
from .storage import advance_soc, drift_bound_slack, fleet_envelopes, initial_state, tune_fleet
from .storage import suboptimality_report as storage_gaps

TRAJECTORY_VERSION = 1
LYAPUNOV_MODES = ("weighted", "nonweighted", "relaxed_sign")
ZERO_FORCED_TOL = 1e-9


@dataclass
class World:
    """Feeder, fleet and a market scenario.

    ``tick(t, seed)`` returns the MarketTick of period t; ``bounds`` is the
    WorldBounds used for tuning.
    """

    feeder: object
    fleet: object
    bounds: object
    tick: object
    name: str = ""

    def __post_init__(self):
        if len(self.fleet) != self.feeder.n_bus:
            raise ValueError(f"fleet has {len(self.fleet)} units for {self.feeder.n_bus} buses")
        if self.bounds.n != self.feeder.n_bus:
            raise ValueError("market bounds do not match the number of buses")
        self.sens = build_sensitivities(self.feeder)


def synthetic_world(feeder, fleet, cfg: SyntheticConfig, name="scenario1"):
    return World(feeder, fleet, cfg.bounds(), lambda t, seed: scenario_synthetic(cfg, t), name)


def random_world(feeder, fleet, cfg: RandomConfig, name="random"):
    return World(feeder, fleet, cfg.bounds, lambda t, seed: scenario_random(cfg, seed, t), name)


def trace_world(feeder, fleet, scenario, name="traces"):
    return World(feeder, fleet, scenario.bounds, lambda t, seed: scenario(t), name)


@dataclass
class TrajectoryRecord:
    t: int
    tick: object
    b: np.ndarray
    cost: float
    user_costs: np.ndarray
    x: np.ndarray          # queue at the start of the period (s + gamma)
    s: np.ndarray          # SoC after the decision
    v_min: float           # voltage magnitudes under the linear model
    v_max: float
    v_slack: float         # smallest voltage-band slack (squared voltage)
    iterations: int = 0
    drift_slack: float = float("nan")
    zero_forced_ok: bool = True
    fallback: bool = False


@dataclass
class Metrics:
    mode: str
    solver: str
    T: int
    avg_cost: float
    user_avg_costs: np.ndarray
    k_star: float
    k_prime: float
    distance_bound: float
    soc_violations: int = 0
    voltage_violations: int = 0
    sign_violations: int = 0
    zero_forced_violations: int = 0
    drift_violations: int = 0
    fallbacks: int = 0
    alignment: float = float("nan")
    dual_iterations: int = 0

    def as_text(self):
        rows = [
            ("mode", self.mode), ("solver", self.solver), ("T", self.T),
            ("avg_cost", repr(self.avg_cost)),
            ("k_star", repr(self.k_star)), ("k_prime", repr(self.k_prime)),
            ("distance_bound", repr(self.distance_bound)),
            ("soc_violations", self.soc_violations),
            ("voltage_violations", self.voltage_violations),
            ("sign_violations", self.sign_violations),
            ("zero_forced_violations", self.zero_forced_violations),
            ("drift_violations", self.drift_violations),
            ("fallbacks", self.fallbacks),
            ("alignment", repr(self.alignment)),
            ("dual_iterations", self.dual_iterations),
        ]
        rows += [(f"user_avg_cost_{i}", repr(float(v)))
                 for i, v in enumerate(self.user_avg_costs, start=1)]
        return "".join(f"{k}={v}\n" for k, v in rows)


@dataclass
class FeasibilityReport:
    soc_ok: bool
    voltage_ok: bool
    sign_ok: bool
    time_average_ok: bool
    soc_violations: list = field(default_factory=list)      # (t, user)
    voltage_violations: list = field(default_factory=list)  # (t, slack)
    sign_violations: list = field(default_factory=list)     # (t, user)
    alignment: float = float("nan")
    fallbacks: int = 0
    time_average: np.ndarray = None
    time_average_bound: np.ndarray = None

    @property
    def ok(self):
        return self.soc_ok and self.voltage_ok and self.sign_ok and self.time_average_ok


def suboptimality_report(fleet, envelopes, cp_min):
    """(K*, K', 2 K* / cp_min) for the weighted and common-weight policies."""
    k_star, k_prime = storage_gaps(list(fleet), envelopes)
    assert k_star <= k_prime, (k_star, k_prime)
    return k_star, k_prime, 2 * k_star / cp_min


def _params_for(mode, world, convention):
    if mode == "greedy":
        return None
    tune_mode = "nonweighted" if mode == "nonweighted" else "weighted"
    return tune_fleet(world.fleet, world.bounds, tune_mode, convention)


def _fallback_allowed(problem):
    return bool(np.all(problem.lo <= 0.0) and np.all(problem.hi >= 0.0))


def run(world, mode, solver="centralized", T=1, seed=0, convention="proof", dual_config=None):
    """Simulate ``T`` periods; returns (Metrics, list of TrajectoryRecord)."""
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    if solver not in ("centralized", "distributed"):
        raise ValueError(f"unknown solver {solver!r}")
    if dual_config is None:
        dual_config = DualConfig()
    fleet, feeder, sens = world.fleet, world.feeder, world.sens
    params = _params_for(mode, world, convention)
    state = initial_state(fleet, params)
    n = len(fleet)
    w = None if params is None else np.array([p.w for p in params])
    b_prev = np.zeros(n)
    records = []
    for t in range(T):
        tick = world.tick(t, seed)
        x = state.x
        try:
            problem = assemble_step(state, tick, params, mode, fleet, sens, feeder, b_prev)
        except InfeasibleStepError as err:
            raise InfeasibleStepError(str(err), t) from None
        fallback = False
        iterations = 0
        try:
            if solver == "centralized":
                decision = solve_centralized(problem)
                b = decision.b
            else:
                decision, trace = solve_distributed(problem, dual_config)
                b = decision.b
                iterations = len(trace)
        except InfeasibleStepError as err:
            # voltage band unreachable this period; hold the batteries if that is allowed
            if not _fallback_allowed(problem):
                raise InfeasibleStepError(str(err), t) from None
            b = np.zeros(n)
            fallback = True
        new_state = advance_soc(state, b, fleet, t)
        s_lo, s_hi = problem.voltage_slacks(b)
        v = feeder.v0 - sens.R @ (b + tick.l) - sens.X @ tick.q
        rec = TrajectoryRecord(
            t=t, tick=tick, b=np.asarray(b, dtype=float).copy(),
            cost=aggregate_cost(b, tick), user_costs=per_user_cost(b, tick),
            x=np.asarray(x, dtype=float).copy(), s=new_state.s.copy(),
            v_min=float(np.sqrt(max(v.min(), 0.0))), v_max=float(np.sqrt(max(v.max(), 0.0))),
            v_slack=float(min(s_lo.min(), s_hi.min())), iterations=iterations, fallback=fallback,
        )
        if mode in LYAPUNOV_MODES:
            rec.drift_slack = drift_bound_slack(x, b, w, fleet)
        if mode == "weighted" and not fallback:
            forced = zero_forced(x, params, tick.r)
            rec.zero_forced_ok = bool(np.all(np.abs(b[forced]) <= ZERO_FORCED_TOL))
        records.append(rec)
        state = new_state
        b_prev = np.asarray(b, dtype=float)
    return summarize(records, world, mode, solver, convention), records


def summarize(records, world, mode, solver, convention="proof"):
    env = fleet_envelopes(world.bounds, convention)
    k_star, k_prime, bound = suboptimality_report(world.fleet, env, world.bounds.cp_min)
    report = audit(records, world.fleet, mode)
    T = len(records)
    costs = np.array([r.cost for r in records])
    user = np.array([r.user_costs for r in records])
    return Metrics(
        mode=mode, solver=solver, T=T,
        avg_cost=float(np.mean(costs)), user_avg_costs=user.mean(axis=0),
        k_star=k_star, k_prime=k_prime, distance_bound=bound,
        soc_violations=len(report.soc_violations),
        voltage_violations=len(report.voltage_violations),
        sign_violations=len(report.sign_violations),
        zero_forced_violations=sum(not r.zero_forced_ok for r in records),
        drift_violations=sum(bool(r.drift_slack < -1e-9) for r in records),
        fallbacks=report.fallbacks, alignment=report.alignment,
        dual_iterations=int(sum(r.iterations for r in records)),
    )


def audit(records, fleet, mode, soc_tol=1e-9, voltage_tol=1e-9, sign_tol=1e-12):
    """Check SoC limits, voltage band, regulation sign and the time-average bound."""
    s_min, s_max = fleet.s_min, fleet.s_max
    soc_bad, volt_bad, sign_bad = [], [], []
    aligned = active = 0
    total = np.zeros(len(fleet))
    for rec in records:
        for i in np.flatnonzero((rec.s < s_min - soc_tol) | (rec.s > s_max + soc_tol)):
            soc_bad.append((rec.t, int(i) + 1))
        if rec.v_slack < -voltage_tol:
            volt_bad.append((rec.t, rec.v_slack))
        signed = rec.tick.r * rec.b
        if mode in SIGN_CONSTRAINED:
            for i in np.flatnonzero(signed < -sign_tol):
                sign_bad.append((rec.t, int(i) + 1))
        moving = np.abs(rec.b) > sign_tol
        active += int(moving.sum())
        aligned += int((moving & (signed > 0)).sum())
        total += rec.b
    T = max(len(records), 1)
    avg = np.abs(total) / T
    limit = (s_max - s_min) / T
    return FeasibilityReport(
        soc_ok=not soc_bad, voltage_ok=not volt_bad, sign_ok=not sign_bad,
        time_average_ok=bool(np.all(avg <= limit + soc_tol / T)),
        soc_violations=soc_bad, voltage_violations=volt_bad, sign_violations=sign_bad,
        alignment=aligned / active if active else float("nan"),
        fallbacks=sum(r.fallback for r in records),
        time_average=avg, time_average_bound=limit,
    )


def format_trajectory(records):
    """CSV with a versioned header comment; floats written with repr for exact replay."""
    n = records[0].b.shape[0] if records else 0
    buf = io.StringIO()
    buf.write(f"# storagegame trajectory v{TRAJECTORY_VERSION}\n")
    cols = (["t", "r", "c0", "cp", "cr", "cost", "v_min", "v_max", "v_slack", "iterations",
             "drift_slack", "zero_forced_ok", "fallback"]
            + [f"b_{i}" for i in range(1, n + 1)] + [f"s_{i}" for i in range(1, n + 1)]
            + [f"x_{i}" for i in range(1, n + 1)] + [f"f_{i}" for i in range(1, n + 1)])
    buf.write(",".join(cols) + "\n")
    for r in records:
        row = [str(r.t), str(r.tick.r), repr(float(r.tick.c0)), repr(float(r.tick.cp)),
               repr(float(r.tick.cr)), repr(r.cost), repr(r.v_min), repr(r.v_max),
               repr(r.v_slack), str(r.iterations), repr(float(r.drift_slack)),
               str(int(r.zero_forced_ok)), str(int(r.fallback))]
        for vec in (r.b, r.s, r.x, r.user_costs):
            row += [repr(float(v)) for v in vec]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
