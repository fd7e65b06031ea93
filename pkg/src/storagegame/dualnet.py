"""
Distributed per-period solver: dual decomposition between one aggregator and
N users exchanging messages in synchronous rounds.

Per round the aggregator sends user n the scalar lam_tilde_n, every user
answers with its projected best response b_n, and the aggregator updates
(nu, lam_lo, lam_hi) by projected ascent on the dual. The aggregator never
sees per-user loads, limits or SoCs. It learns the total load through
partial sums along a spanning tree and the load-induced voltage drop from
voltage measurements.
"""

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .controller import Decision
from .errors import NotConvergedError, TopologyError

HARMONIC_ETA_NU = 3e6
HARMONIC_ETA_LAMBDA = 2.0
SCHEDULES = ("newton", "scaled", "diminishing", "harmonic")
_LM_START = 1e-3
_LM_MIN = 1e-12
_LM_MAX = 1e12


@dataclass
class DualState:
    nu: float
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    j: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(0.0, np.zeros(n), np.zeros(n), 0)


@dataclass
class DualConfig:
    """Stopping rule and step rule for the message rounds.

    ``schedule`` selects the dual update:

    * ``"newton"``: scaled projected ascent whose scaling is the local dual
      curvature. The aggregator measures each user's local price response
      with one probe round, then takes a Levenberg-Marquardt damped step
      that is kept only when it certifiably does not decrease the dual.
    * ``"scaled"``: constant diagonal steps from the dual curvature bound.
    * ``"diminishing"``: the scaled steps divided by sqrt(j + 1).
    * ``"harmonic"``: eta_nu = 3e6/(j+1), eta_lam = 2/(j+1).
    """

    max_iters: int = 2000
    tol: float = 1e-11
    schedule: str = "newton"
    step_factor: float = 1.0
    tree_seed: int = None
    raise_on_failure: bool = True

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown step schedule {self.schedule!r}")
        if self.max_iters < 1 or not self.tol > 0:
            raise ValueError("need max_iters >= 1 and tol > 0")


@dataclass
class TraceRow:
    j: int
    nu: float
    residual: float
    b: np.ndarray
    lam_lo: np.ndarray
    lam_hi: np.ndarray


@dataclass
class MessageLog:
    """Records every message that reaches the aggregator (kind, size)."""

    entries: list = field(default_factory=list)

    def record(self, kind, payload):
        self.entries.append((kind, int(np.size(payload))))

    def kinds(self):
        return {k for k, _ in self.entries}


# -- user side -----------------------------------------------------------------


def user_response(n, lam_tilde_n, c_n, cp, l_n, r, box):
    """Closed-form best response of user ``n``: clip(-(c_n + lam)/cp - l_n, box)."""
    lo, hi = box
    return max(min(-(c_n + lam_tilde_n) / cp - l_n, hi), lo)


class UserPool:
    """Private data of all users; answers price messages entrywise.

    Entry n of the response depends only on entry n of the message and on
    user n's own data, so this is N independent agents evaluated together.
    """

    def __init__(self, c, cp, l, r, lo, hi):
        self._c = np.asarray(c, dtype=float)
        self._cp = float(cp)
        self._l = np.asarray(l, dtype=float)
        self._r = r
        self._lo = np.asarray(lo, dtype=float)
        self._hi = np.asarray(hi, dtype=float)

    @classmethod
    def from_problem(cls, problem):
        return cls(problem.c, problem.cp, problem.l, problem.r, problem.lo, problem.hi)

    def __len__(self):
        return self._c.shape[0]

    def respond(self, lam_tilde):
        raw = -(self._c + lam_tilde) / self._cp - self._l
        return np.maximum(np.minimum(raw, self._hi), self._lo)

    def load(self, n):
        """Own load of user n, used only for its tree message."""
        return self._l[n]


# -- aggregation tree --------------------------------------------------------------


def random_spanning_tree(n, rng):
    """Parent array over nodes 0..n (node 0 is the aggregator): parent[i] for i >= 1."""
    order = rng.permutation(np.arange(1, n + 1))
    parent = np.zeros(n + 1, dtype=int)
    placed = [0]
    for node in order:
        parent[node] = placed[int(rng.integers(len(placed)))]
        placed.append(int(node))
    return parent


def star_tree(n):
    return np.zeros(n + 1, dtype=int)


def chain_tree(n):
    parent = np.arange(-1, n, dtype=int)
    parent[0] = 0
    return parent


def tree_sum(parent, values):
    """Leaf-to-root partial sums; each node adds children in ascending index order.

    ``parent[i]`` for i = 1..N gives the parent of node i (0 is the root and
    carries no value). ``values[i - 1]`` is node i's own value.
    """
    parent = np.asarray(parent)
    n = len(values)
    children = [[] for _ in range(n + 1)]
    for i in range(1, n + 1):
        p = int(parent[i])
        if not 0 <= p <= n or p == i:
            raise TopologyError(f"node {i} has invalid parent {p}")
        children[p].append(i)
    # post-order from the root; nodes on cycles are never reached
    partial = [0.0] * (n + 1)
    stack = [(0, False)]
    reached = 0
    while stack:
        node, done = stack.pop()
        if done:
            total = 0.0 if node == 0 else float(values[node - 1])
            for ch in children[node]:
                total += partial[ch]
            partial[node] = total
            continue
        reached += 1
        stack.append((node, True))
        for ch in reversed(children[node]):
            stack.append((ch, False))
    if reached != n + 1:
        raise TopologyError("aggregation tree does not span all users")
    return partial[0]


# -- aggregator side -------------------------------------------------------------


def primal_a(nu, cp):
    return -nu / cp


def estimate_background(v_measured, v0, R, b_prev):
    """R l + X q recovered from measured squared voltages and last decisions."""
    return v0 - np.asarray(v_measured, dtype=float) - R @ np.asarray(b_prev, dtype=float)


def dual_ascent(state, a, b, l, q, R, X, alpha, beta, eta_nu, eta_lam):
    """One projected gradient-ascent step on (nu, lam_lo, lam_hi)."""
    l = np.asarray(l, dtype=float)
    return _ascent(state, a, b, float(l.sum()), R @ l + X @ np.asarray(q, dtype=float),
                   R, alpha, beta, eta_nu, eta_lam)


def _ascent(state, a, b, total_load, background, R, alpha, beta, eta_nu, eta_lam):
    # same step written with the two aggregated quantities the aggregator holds
    drop = R @ b + background
    nu = state.nu + eta_nu * (a - (b.sum() + total_load))
    lam_lo = np.maximum(state.lam_lo + eta_lam * (drop + alpha), 0.0)
    lam_hi = np.maximum(state.lam_hi - eta_lam * (drop + beta), 0.0)
    return DualState(nu, lam_lo, lam_hi, state.j + 1)


@lru_cache(maxsize=32)
def _unit_metric(R_bytes, n):
    """Diagonal step metric for unit cp: row-normalized, scaled to the curvature bound."""
    R = np.frombuffer(R_bytes).reshape(n, n)
    rows = np.sum(R * R, axis=1)
    d = np.concatenate([[1.0 / (n + 1)], 1.0 / rows, 1.0 / rows])
    B = _coupling(R)
    M = B @ B.T
    M[0, 0] += 1.0
    sq = np.sqrt(d)
    d = d / np.linalg.eigvalsh(sq[:, None] * M * sq[None, :])[-1]
    d.setflags(write=False)
    return d


def _coupling(R):
    """B with lam_tilde = B' y for y = (nu, lam_lo, lam_hi)."""
    n = R.shape[0]
    return np.vstack([-np.ones((1, n)), R, -R])


def step_metric(cp, R):
    """Per-coordinate step lengths (nu, lam_lo, lam_hi) within the dual curvature bound."""
    n = R.shape[0]
    return cp * _unit_metric(np.ascontiguousarray(R, dtype=float).tobytes(), n)


def step_sizes(config, j, cp, R):
    """(eta_nu, eta_lam) for iteration j of the gradient schedules."""
    if config.schedule == "harmonic":
        return HARMONIC_ETA_NU / (j + 1), HARMONIC_ETA_LAMBDA / (j + 1)
    n = R.shape[0]
    d = config.step_factor * step_metric(cp, R)
    if config.schedule == "diminishing":
        d = d / np.sqrt(j + 1)
    return d[0], d[1:n + 1]


def _pack(state):
    return np.concatenate([[state.nu], state.lam_lo, state.lam_hi])


def _unpack(y, j):
    n = (y.shape[0] - 1) // 2
    return DualState(float(y[0]), y[1:n + 1].copy(), y[n + 1:].copy(), j)


def _project(y):
    out = y.copy()
    out[1:] = np.maximum(out[1:], 0.0)
    return out


class Aggregator:
    """Holds only public data: prices, R, the voltage band and v0."""

    def __init__(self, cp, R, alpha, beta, v0, log=None):
        self.cp = float(cp)
        self.R = R
        self.alpha = alpha
        self.beta = beta
        self.v0 = v0
        self.log = log
        self._metric = step_metric(self.cp, R)

    def _receive(self, kind, payload):
        if self.log is not None:
            self.log.record(kind, payload)
        return payload

    def _round(self, users, y, j, trace):
        """Broadcast lam_tilde for dual point y, collect responses, evaluate."""
        n = self.R.shape[0]
        lam_lo, lam_hi = y[1:n + 1], y[n + 1:]
        lam_tilde = self.R @ (lam_lo - lam_hi) - y[0]
        b = self._receive("b_response", users.respond(lam_tilde))
        drop = self.R @ b + self._background
        g = np.concatenate([[primal_a(y[0], self.cp) - (b.sum() + self._total)],
                            drop + self.alpha, -(drop + self.beta)])
        # projected-gradient mapping: zero exactly at a KKT point
        res = float(np.max(np.abs(y - _project(y + self._metric * g)) / self._metric))
        if not np.isfinite(res):
            res = np.inf
        trace.append(TraceRow(j, float(y[0]), res, b, lam_lo.copy(), lam_hi.copy()))
        return lam_tilde, b, g, res

    def solve(self, users, tree_total, v_measured, b_prev, config, state=None):
        n = len(users)
        self._background = estimate_background(self._receive("voltage", v_measured),
                                               self.v0, self.R, b_prev)
        self._total = self._receive("tree_partial", tree_total())
        if state is None:
            state = DualState.zeros(n)
        if config.schedule == "newton":
            return self._solve_newton(users, config, state)
        return self._solve_gradient(users, config, state)

    def _solve_gradient(self, users, config, state):
        trace = []
        y = _pack(state)
        for j in range(config.max_iters):
            _, b, _, res = self._round(users, y, j, trace)
            if res <= config.tol:
                return b, _unpack(y, j), trace, res
            if not np.isfinite(res):
                break
            eta_nu, eta_lam = step_sizes(config, j, self.cp, self.R)
            with np.errstate(over="ignore", invalid="ignore"):
                new = _ascent(_unpack(y, j), primal_a(y[0], self.cp), b, self._total,
                              self._background, self.R, self.alpha, self.beta, eta_nu, eta_lam)
            y = _pack(new)
        return b, _unpack(y, len(trace)), trace, res

    def _solve_newton(self, users, config, state):
        trace = []
        cp = self.cp
        d = self._metric
        B = _coupling(self.R)
        y = _pack(state)
        lam_tilde, b, g, res = self._round(users, y, 0, trace)
        mu = _LM_START
        while res > config.tol and len(trace) < config.max_iters:
            # probe: shift every price message by delta to read local slopes
            delta = 1e-7 * max(1.0, float(np.max(np.abs(lam_tilde))))
            probe = y.copy()
            probe[0] -= delta
            _, b_probe, _, _ = self._round(users, probe, len(trace), trace)
            slope = np.clip(np.round(-cp * (b_probe - b) / delta), 0.0, 1.0)
            H = (B * (slope / cp)) @ B.T
            H[0, 0] += 1.0 / cp
            held = np.zeros(y.shape[0], dtype=bool)
            held[1:] = (y + d * g)[1:] <= 0.0
            free = ~held
            while len(trace) < config.max_iters:
                step = np.zeros_like(y)
                step[held] = -y[held]
                rhs = g[free] - H[np.ix_(free, held)] @ step[held]
                A = H[np.ix_(free, free)] + mu * np.diag(1.0 / d[free])
                try:
                    step[free] = np.linalg.solve(A, rhs)
                except np.linalg.LinAlgError:
                    step[free] = np.linalg.lstsq(A, rhs, rcond=None)[0]
                cand = _project(y + step)
                lt_c, b_c, g_c, res_c = self._round(users, cand, len(trace), trace)
                # concavity: D(cand) - D(y) >= g(cand)'(cand - y)
                if g_c @ (cand - y) >= 0.0 or res_c <= 0.5 * res or res_c <= config.tol:
                    y, lam_tilde, b, g, res = cand, lt_c, b_c, g_c, res_c
                    mu = max(mu / 10.0, _LM_MIN)
                    break
                mu = min(mu * 4.0, _LM_MAX)
        return b, _unpack(y, len(trace)), trace, res


def measure_ldf(problem):
    """Squared voltages the aggregator would read, under the linear model."""
    p = problem.l + problem.b_prev
    return problem.v0 - problem.R @ p - problem.X @ problem.q


def solve_distributed(problem, config=None, voltages=None, log=None, state=None):
    """Run the message rounds on ``problem``; returns (Decision, trace).

    ``voltages`` are the measured squared voltages with the previous
    decisions applied; the linear model is used when omitted.
    """
    if config is None:
        config = DualConfig()
    users = UserPool.from_problem(problem)
    n = problem.n
    rng = np.random.default_rng(config.tree_seed)
    parent = random_spanning_tree(n, rng)
    loads = [users.load(i) for i in range(n)]

    if voltages is None:
        voltages = measure_ldf(problem)
    agg = Aggregator(problem.cp, problem.R, problem.alpha, problem.beta, problem.v0, log)
    with np.errstate(over="ignore", invalid="ignore"):
        b, dual, trace, res = agg.solve(users, lambda: tree_sum(parent, loads), voltages,
                                        problem.b_prev, config, state)
    ok = res <= config.tol
    s_lo, s_hi = problem.voltage_slacks(b)
    decision = Decision(
        b=b,
        objective=problem.objective(b),
        lam_lo=dual.lam_lo,
        lam_hi=dual.lam_hi,
        nu=dual.nu,
        kkt_residual=res,
        iterations=len(trace),
        solver="distributed",
        active_box=(b <= problem.lo) | (b >= problem.hi),
        active_voltage=np.concatenate([s_lo <= 1e-12, s_hi <= 1e-12]),
    )
    if not ok and config.raise_on_failure:
        raise NotConvergedError(
            f"dual decomposition stopped at residual {res:.3e} "
            f"after {len(trace)} iterations (tol {config.tol:.1e})",
            decision, trace,
        )
    return decision, trace


def format_trace(trace):
    n = trace[0].b.shape[0]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["j", "nu", "residual"] + [f"b_{i}" for i in range(1, n + 1)]
               + [f"lambda_lo_{i}" for i in range(1, n + 1)]
               + [f"lambda_hi_{i}" for i in range(1, n + 1)])
    for row in trace:
        w.writerow([row.j, repr(float(row.nu)), repr(float(row.residual))]
                   + [repr(float(v)) for v in row.b]
                   + [repr(float(v)) for v in row.lam_lo]
                   + [repr(float(v)) for v in row.lam_hi])
    return buf.getvalue()
