"""
Battery fleet: unit limits, virtual queues and closed-form parameter tuning.

The virtual queue of unit n is x_n = s_n + gamma_n. Choosing the weight w_n
and shift gamma_n from the price envelope (g_lo, g_hi) keeps the SoC inside
its limits without constraining it explicitly in the per-period problem.
"""

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AssumptionError, DegenerateEnvelopeError, SoCViolationError, ValidationError

SOC_TOL = 1e-9


@dataclass(frozen=True)
class StorageUnit:
    s_min: float
    s_max: float
    b_min: float
    b_max: float
    bus: int = 0
    label: str = ""

    def __post_init__(self):
        if self.s_min < 0:
            raise ValidationError(f"unit at bus {self.bus}: s_min must be >= 0")
        if not self.b_min < 0 < self.b_max:
            raise ValidationError(f"unit at bus {self.bus}: need b_min < 0 < b_max")
        if self.s_max <= self.s_min:
            raise ValidationError(f"unit at bus {self.bus}: need s_max > s_min")

    @property
    def slow_charging(self):
        return self.s_max - self.s_min > self.b_max - self.b_min

    def check_slow_charging(self):
        if not self.slow_charging:
            raise AssumptionError(
                f"unit at bus {self.bus}: s_max - s_min = {self.s_max - self.s_min} "
                f"must exceed b_max - b_min = {self.b_max - self.b_min}"
            )

    @property
    def b_sq_max(self):
        return max(self.b_max**2, self.b_min**2)


@dataclass(frozen=True)
class TunedParams:
    g_lo: float
    g_hi: float
    delta: float
    w: float
    gamma: float
    k: float  # this unit's share of the suboptimality gap

    def gamma_interval(self, unit):
        return gamma_interval(unit, self.g_lo, self.g_hi, self.w)


@dataclass
class FleetState:
    """SoC vector and shift; the queue x = s + gamma is derived."""

    s: np.ndarray
    gamma: np.ndarray

    @property
    def x(self):
        return self.s + self.gamma

    def copy(self):
        return FleetState(self.s.copy(), self.gamma.copy())


class Fleet:
    """Ordered collection of storage units, one per load bus."""

    def __init__(self, units, s0=None):
        self.units = tuple(units)
        self.s0 = None if s0 is None else np.asarray(s0, dtype=float)

    def __len__(self):
        return len(self.units)

    def __iter__(self):
        return iter(self.units)

    def __getitem__(self, i):
        return self.units[i]

    def _arr(self, name):
        return np.array([getattr(u, name) for u in self.units])

    @property
    def s_min(self):
        return self._arr("s_min")

    @property
    def s_max(self):
        return self._arr("s_max")

    @property
    def b_min(self):
        return self._arr("b_min")

    @property
    def b_max(self):
        return self._arr("b_max")

    def initial_soc(self):
        return self.s_min if self.s0 is None else self.s0.copy()


def parse_fleet(text):
    """Parse ``bus,s_min,s_max,b_min,b_max[,s0]`` rows (``#`` comments allowed).

    A trailing ``# label`` on a row is kept as the unit label. Rows are sorted
    by bus index, which must run 1..N.
    """
    units = []
    s0 = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body, _, comment = raw.partition("#")
        body = body.strip()
        if not body:
            continue
        fields = [f.strip() for f in body.split(",")]
        if fields[0] == "bus":
            continue
        if len(fields) not in (5, 6):
            raise ValidationError(f"fleet line {lineno}: expected 5 or 6 fields, got {len(fields)}")
        try:
            bus = int(fields[0])
            vals = [float(f) for f in fields[1:]]
        except ValueError:
            raise ValidationError(f"fleet line {lineno}: cannot parse {body!r}") from None
        units.append(StorageUnit(vals[0], vals[1], vals[2], vals[3], bus, comment.strip()))
        s0.append(vals[4] if len(vals) == 5 else None)
    order = sorted(range(len(units)), key=lambda i: units[i].bus)
    units = [units[i] for i in order]
    s0 = [s0[i] for i in order]
    if [u.bus for u in units] != list(range(1, len(units) + 1)):
        raise ValidationError("fleet buses must be exactly 1..N")
    if all(v is None for v in s0):
        return Fleet(units)
    if any(v is None for v in s0):
        raise ValidationError("initial SoC must be given for all units or none")
    return Fleet(units, s0)


def load_fleet(path):
    return parse_fleet(Path(path).read_text(encoding="utf-8"))


def format_fleet(fleet):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus", "s_min", "s_max", "b_min", "b_max"])
    for u in fleet:
        w.writerow([u.bus, repr(u.s_min), repr(u.s_max), repr(u.b_min), repr(u.b_max)])
    return buf.getvalue()


# -- price envelope and tuning -------------------------------------------------


def price_envelope(n, bounds, convention="proof"):
    """Bounds (g_lo, g_hi) on the marginal energy price seen by unit ``n``.

    g_lo bounds c0 + cp*(1'(b+l) + l_n) - cr from below over every admissible
    tick with b >= 0; g_hi bounds c0 + cp*(1'(b+l) + l_n) + cr from above with
    b <= 0. ``convention="statement"`` divides the cp terms by N instead.
    """
    if convention not in ("proof", "statement"):
        raise ValueError(f"unknown convention {convention!r}")
    N = bounds.n
    scale = 1.0 / N if convention == "statement" else 1.0
    load_lo = float(np.sum(bounds.l_min) + bounds.l_min[n])
    load_hi = float(np.sum(bounds.l_max) + bounds.l_max[n])
    cp_lo, cp_hi = scale * bounds.cp_min, scale * bounds.cp_max
    # cp * load is linear in cp; pick the extreme that matches the load sign
    g_lo = bounds.c0_min + min(cp_lo * load_lo, cp_hi * load_lo) - bounds.cr_max
    g_hi = bounds.c0_max + max(cp_lo * load_hi, cp_hi * load_hi) + bounds.cr_max
    if not g_hi > g_lo:
        raise DegenerateEnvelopeError(f"unit {n}: price envelope collapsed (g_lo={g_lo}, g_hi={g_hi})")
    return g_lo, g_hi


def fleet_envelopes(bounds, convention="proof"):
    return [price_envelope(n, bounds, convention) for n in range(bounds.n)]


def delta_of(unit, g_lo, g_hi):
    return (unit.s_max - unit.s_min + unit.b_min - unit.b_max) / (g_hi - g_lo)


def gamma_interval(unit, g_lo, g_hi, w):
    """Admissible SoC shifts for weight ``w``; empty unless w * delta >= 1."""
    lo = -g_lo / w + unit.b_max - unit.s_max
    hi = -g_hi / w + unit.b_min - unit.s_min
    return lo, hi


def tune_weighted(unit, g_lo, g_hi):
    unit.check_slow_charging()
    if not g_hi > g_lo:
        raise DegenerateEnvelopeError("need g_hi > g_lo")
    delta = delta_of(unit, g_lo, g_hi)
    w = 1.0 / delta
    gamma = -(g_hi * (unit.s_max - unit.b_max) - g_lo * (unit.s_min - unit.b_min)) / (g_hi - g_lo)
    return TunedParams(g_lo, g_hi, delta, w, gamma, unit.b_sq_max / (2 * delta))


def tune_nonweighted(units, envelopes):
    """Common weight 1/min(delta) with each shift at the middle of its interval."""
    for u in units:
        u.check_slow_charging()
    deltas = [delta_of(u, lo, hi) for u, (lo, hi) in zip(units, envelopes)]
    d_min = min(deltas)
    w = 1.0 / d_min
    out = []
    for u, (lo, hi), d in zip(units, envelopes, deltas):
        a, b = gamma_interval(u, lo, hi, w)
        out.append(TunedParams(lo, hi, d, w, 0.5 * (a + b), u.b_sq_max / (2 * d_min)))
    return out


def tune_fleet(fleet, bounds, mode="weighted", convention="proof"):
    env = fleet_envelopes(bounds, convention)
    if mode == "weighted":
        return [tune_weighted(u, lo, hi) for u, (lo, hi) in zip(fleet, env)]
    if mode == "nonweighted":
        return tune_nonweighted(list(fleet), env)
    raise ValueError(f"no tuning for mode {mode!r}")


def suboptimality_report(units, envelopes):
    """Return (K_star, K_prime): weighted and common-weight suboptimality gaps."""
    deltas = np.array([delta_of(u, lo, hi) for u, (lo, hi) in zip(units, envelopes)])
    bsq = np.array([u.b_sq_max for u in units])
    # same summation order for both, so K* <= K' holds exactly term by term
    # and a homogeneous fleet gives K* == K' bit for bit
    k_star = float(np.sum(bsq / (2 * deltas)))
    k_prime = float(np.sum(bsq / (2 * deltas.min())))
    return k_star, k_prime


# -- dynamics ----------------------------------------------------------------


def initial_state(fleet, params=None):
    s = fleet.initial_soc()
    gamma = np.zeros(len(fleet)) if params is None else np.array([p.gamma for p in params])
    return FleetState(s, gamma)


def advance_soc(state, b, fleet, period=None, tol=SOC_TOL):
    """Apply s <- s + b. Raises SoCViolationError instead of clamping."""
    b = np.asarray(b, dtype=float)
    s_new = state.s + b
    lo = fleet.s_min - tol
    hi = fleet.s_max + tol
    bad = np.flatnonzero((s_new < lo) | (s_new > hi))
    if bad.size:
        users = [int(i) + 1 for i in bad]
        raise SoCViolationError(f"SoC left its limits at users {users}", period, users)
    return FleetState(s_new, state.gamma)


def drift_bound_slack(x, b, w, fleet):
    """Slack of the one-step drift bound on the weighted Lyapunov function.

    Returns  xb-term + 0.5 * sum w max(b_max^2, b_min^2) - (L(x + b) - L(x)),
    which is >= 0 for every b inside the charge limits.
    """
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    bsq = np.maximum(fleet.b_max**2, fleet.b_min**2)
    drift = 0.5 * np.sum(w * (x + b) ** 2) - 0.5 * np.sum(w * x**2)
    bound = np.sum(w * x * b) + 0.5 * np.sum(w * bsq)
    return float(bound - drift)


def drift_bound_holds(x, b, w, fleet, tol=1e-9):
    slack = drift_bound_slack(x, b, w, fleet)
    return slack >= -tol, slack
