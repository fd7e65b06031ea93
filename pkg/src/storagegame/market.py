"""
Exogenous market and load sequences: regulation signal, prices and loads.

Two generators are provided (a periodic synthetic one and an iid random
one) plus a CSV trace reader/writer for recorded data.
"""

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import TraceParseError, ValidationError


@dataclass(frozen=True)
class MarketTick:
    """One period's realization of (r, c0, cp, cr, l, q)."""

    r: int
    c0: float
    cp: float
    cr: float
    l: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        if self.r not in (1, -1):
            raise ValidationError(f"regulation signal must be +1 or -1, got {self.r}")
        object.__setattr__(self, "r", int(self.r))
        for name in ("c0", "cp", "cr"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "l", np.asarray(self.l, dtype=float))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))

    @property
    def n(self):
        return self.l.shape[0]

    def __eq__(self, other):
        if not isinstance(other, MarketTick):
            return NotImplemented
        return (
            self.r == other.r
            and self.c0 == other.c0
            and self.cp == other.cp
            and self.cr == other.cr
            and np.array_equal(self.l, other.l)
            and np.array_equal(self.q, other.q)
        )

    __hash__ = None


@dataclass(frozen=True)
class WorldBounds:
    c0_min: float
    c0_max: float
    cp_min: float
    cp_max: float
    cr_min: float
    cr_max: float
    l_min: np.ndarray
    l_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray

    def __post_init__(self):
        for name in ("l_min", "l_max", "q_min", "q_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for lo, hi in (("c0_min", "c0_max"), ("cp_min", "cp_max"), ("cr_min", "cr_max")):
            a, b = getattr(self, lo), getattr(self, hi)
            if not 0 <= a <= b:
                raise ValidationError(f"bounds need 0 <= {lo} <= {hi}, got {a}, {b}")
        if self.cp_min <= 0:
            raise ValidationError("cp_min must be strictly positive")
        if np.any(self.l_min > self.l_max) or np.any(self.q_min > self.q_max):
            raise ValidationError("load bounds need lower <= upper")

    @property
    def n(self):
        return self.l_min.shape[0]

    def contains(self, tick, tol=0.0):
        return (
            self.c0_min - tol <= tick.c0 <= self.c0_max + tol
            and self.cp_min - tol <= tick.cp <= self.cp_max + tol
            and self.cr_min - tol <= tick.cr <= self.cr_max + tol
            and bool(np.all(tick.l >= self.l_min - tol) and np.all(tick.l <= self.l_max + tol))
            and bool(np.all(tick.q >= self.q_min - tol) and np.all(tick.q <= self.q_max + tol))
        )


# -- Scenario 1: periodic synthetic prices -----------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Periodic prices and regulation signal.

    The price level for c0, cr and N*cp sits at ``low`` for ``low_dwell``
    slots then at ``high`` for ``high_dwell`` slots; r flips every
    ``r_half_period`` slots starting at +1. Loads are constant.
    """

    l: np.ndarray
    q: np.ndarray
    low: float = 5.0
    high: float = 20.0
    low_dwell: int = 10
    high_dwell: int = 5
    r_half_period: int = 15

    def __post_init__(self):
        object.__setattr__(self, "l", np.asarray(self.l, dtype=float))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        if self.low_dwell < 0 or self.high_dwell < 0 or self.low_dwell + self.high_dwell == 0:
            raise ValidationError("dwell lengths must be non-negative with a positive sum")
        if self.r_half_period < 1:
            raise ValidationError("r_half_period must be >= 1")

    def swapped(self):
        """The other reading of the dwell pattern: high level held longer."""
        return replace(self, low_dwell=self.high_dwell, high_dwell=self.low_dwell)

    def bounds(self):
        n = self.l.shape[0]
        lo, hi = min(self.low, self.high), max(self.low, self.high)
        return WorldBounds(lo, hi, lo / n, hi / n, lo, hi, self.l, self.l, self.q, self.q)


def scenario_synthetic(cfg, t):
    n = cfg.l.shape[0]
    phase = t % (cfg.low_dwell + cfg.high_dwell)
    level = cfg.low if phase < cfg.low_dwell else cfg.high
    r = 1 if (t // cfg.r_half_period) % 2 == 0 else -1
    return MarketTick(r, level, level / n, level, cfg.l, cfg.q)


# -- Scenario 2: iid random draws ---------------------------------------------


@dataclass(frozen=True)
class RandomConfig:
    """Uniform draws within ``bounds`` and a fair +/-1 regulation signal.

    With ``cp_mode="c0_over_n"`` the competitive coefficient is tied to the
    base charge as cp = c0 / N, and the cp bounds are derived accordingly.
    """

    bounds: WorldBounds
    cp_mode: str = "uniform"

    def __post_init__(self):
        if self.cp_mode not in ("uniform", "c0_over_n"):
            raise ValidationError(f"unknown cp_mode {self.cp_mode!r}")
        if self.cp_mode == "c0_over_n":
            b = self.bounds
            n = b.n
            object.__setattr__(
                self, "bounds", replace(b, cp_min=b.c0_min / n, cp_max=b.c0_max / n)
            )


def scenario_random(cfg, seed, t):
    rng = np.random.default_rng([int(seed), int(t)])
    b = cfg.bounds
    r = 1 if rng.random() < 0.5 else -1
    c0 = rng.uniform(b.c0_min, b.c0_max)
    if cfg.cp_mode == "c0_over_n":
        cp = c0 / b.n
    else:
        cp = rng.uniform(b.cp_min, b.cp_max)
    cr = rng.uniform(b.cr_min, b.cr_max)
    l = rng.uniform(b.l_min, b.l_max)
    q = rng.uniform(b.q_min, b.q_max)
    return MarketTick(r, float(c0), float(cp), float(cr), l, q)


# -- trace files -------------------------------------------------------------

_BOUND_KEYS = ("c0_min", "c0_max", "cp_min", "cp_max", "cr_min", "cr_max",
               "l_min", "l_max", "q_min", "q_max")


def _bounds_from_ticks(ticks):
    c0 = [t.c0 for t in ticks]
    cp = [t.cp for t in ticks]
    cr = [t.cr for t in ticks]
    L = np.array([t.l for t in ticks])
    Q = np.array([t.q for t in ticks])
    return WorldBounds(min(c0), max(c0), min(cp), max(cp), min(cr), max(cr),
                       L.min(axis=0), L.max(axis=0), Q.min(axis=0), Q.max(axis=0))


def parse_traces(text):
    """Parse trace-file content into (ticks, bounds).

    Bounds come from ``#bounds <key> <values...>`` comment lines when all ten
    keys are declared; otherwise they are the componentwise min/max of the data.
    """
    declared = {}
    rows = []
    header = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("bounds"):
                parts = body.split()
                if len(parts) < 3 or parts[1] not in _BOUND_KEYS:
                    raise TraceParseError(f"malformed bounds line {line!r}", lineno)
                try:
                    declared[parts[1]] = [float(v) for v in parts[2:]]
                except ValueError:
                    raise TraceParseError(f"bad number in {line!r}", lineno) from None
            continue
        if header is None:
            header = [h.strip() for h in line.split(",")]
            if header[:5] != ["t", "r", "c0", "cp", "cr"] or (len(header) - 5) % 2 or len(header) == 5:
                raise TraceParseError("header must be t,r,c0,cp,cr,l_1..l_N,q_1..q_N", lineno)
            continue
        rows.append((lineno, line))
    if header is None:
        raise TraceParseError("missing header row")
    n = (len(header) - 5) // 2

    ticks = []
    for data_row, (lineno, line) in enumerate(rows, start=1):
        fields = line.split(",")
        if len(fields) != len(header):
            raise TraceParseError(f"expected {len(header)} fields, got {len(fields)}", data_row)
        try:
            vals = [float(v) for v in fields]
        except ValueError:
            raise TraceParseError(f"non-numeric field in {line!r}", data_row) from None
        if int(vals[0]) != vals[0] or int(vals[0]) != len(ticks):
            raise TraceParseError(f"period index {fields[0]!r} out of order", data_row)
        if vals[1] not in (1.0, -1.0):
            raise TraceParseError(f"regulation signal must be +1 or -1, got {fields[1]!r}", data_row)
        if min(vals[2:5]) < 0:
            raise TraceParseError("negative price", data_row)
        ticks.append(MarketTick(int(vals[1]), vals[2], vals[3], vals[4],
                                np.array(vals[5:5 + n]), np.array(vals[5 + n:])))
    if not ticks:
        raise TraceParseError("trace has no data rows")

    if declared:
        missing = set(_BOUND_KEYS) - declared.keys()
        if missing:
            raise TraceParseError(f"#bounds lines missing keys {sorted(missing)}")
        kw = {}
        for key in _BOUND_KEYS:
            vals = declared[key]
            if key[0] in "lq":
                if len(vals) != n:
                    raise TraceParseError(f"#bounds {key} needs {n} values")
                kw[key] = np.array(vals)
            else:
                if len(vals) != 1:
                    raise TraceParseError(f"#bounds {key} takes one value")
                kw[key] = vals[0]
        bounds = WorldBounds(**kw)
        for i, tick in enumerate(ticks, start=1):
            if not bounds.contains(tick):
                raise ValidationError(f"row {i}: tick outside the declared bounds")
    else:
        bounds = _bounds_from_ticks(ticks)
    return ticks, bounds


def load_traces(path):
    return parse_traces(Path(path).read_text(encoding="utf-8"))


def format_traces(ticks, bounds=None, comments=()):
    n = ticks[0].n
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    if bounds is not None:
        for key in _BOUND_KEYS:
            val = getattr(bounds, key)
            vals = val if np.ndim(val) else [val]
            buf.write(f"#bounds {key} " + " ".join(repr(float(v)) for v in vals) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "r", "c0", "cp", "cr"] + [f"l_{i}" for i in range(1, n + 1)]
               + [f"q_{i}" for i in range(1, n + 1)])
    for t, tick in enumerate(ticks):
        w.writerow([t, tick.r, repr(float(tick.c0)), repr(float(tick.cp)), repr(float(tick.cr))]
                   + [repr(float(v)) for v in tick.l] + [repr(float(v)) for v in tick.q])
    return buf.getvalue()


def repeat_hourly(ticks, factor=12):
    """Hold each hourly tick for ``factor`` consecutive sub-hourly periods."""
    return [tick for tick in ticks for _ in range(factor)]


class TraceScenario:
    """Indexable scenario backed by a list of ticks; wraps around past the end."""

    def __init__(self, ticks, bounds):
        self.ticks = list(ticks)
        self.bounds = bounds

    def __call__(self, t):
        return self.ticks[t % len(self.ticks)]
