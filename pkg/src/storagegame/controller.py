"""
Per-period charging problems for each policy and the centralized solver.

Policies:

* ``weighted``     queue term sum_n w_n x_n b_n with per-unit tuned weights
* ``nonweighted``  same, one common weight for every unit
* ``greedy``       instantaneous cost only, SoC limits enforced explicitly
* ``relaxed_sign`` weighted queue term, regulation sign dropped, SoC limits
                   enforced explicitly
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleStepError
from .qp import solve_qp

MODES = ("weighted", "nonweighted", "greedy", "relaxed_sign")
SIGN_CONSTRAINED = ("weighted", "nonweighted", "greedy")
_BOX_SNAP = 1e-12


@dataclass
class StepProblem:
    """min sum_n c_n b_n + cp/2 ||b + l||^2 + cp/2 (1'(b + l))^2  + const

    subject to lo <= b <= hi and alpha <= -R(b + l) - Xq <= beta.
    """

    c: np.ndarray
    cp: float
    l: np.ndarray
    q: np.ndarray
    r: int
    lo: np.ndarray
    hi: np.ndarray
    R: np.ndarray
    X: np.ndarray
    alpha: float
    beta: float
    v0: float = 1.0
    c0: float = 0.0
    mode: str = "weighted"
    b_prev: np.ndarray = None

    def __post_init__(self):
        if not self.cp > 0:
            raise ValueError("cp must be strictly positive for a strictly convex step")
        if self.b_prev is None:
            self.b_prev = np.zeros_like(self.l)

    @property
    def n(self):
        return self.c.shape[0]

    def background(self):
        """R l + X q: the voltage drop caused by the loads alone."""
        return self.R @ self.l + self.X @ self.q

    def qp_data(self):
        n = self.n
        ones = np.ones(n)
        H = self.cp * (np.eye(n) + np.outer(ones, ones))
        g = self.c + self.cp * (self.l + self.l.sum())
        u = self.background()
        eye = np.eye(n)
        G = np.vstack([eye, -eye, self.R, -self.R])
        h = np.concatenate([self.hi, -self.lo, -self.alpha - u, self.beta + u])
        return H, g, G, h

    def objective(self, b):
        p = b + self.l
        return float(self.c @ b + 0.5 * self.cp * (p @ p + p.sum() ** 2) + self.c0 * self.l.sum())

    def voltage_slacks(self, b):
        dv = -(self.R @ (b + self.l)) - self.X @ self.q
        return dv - self.alpha, self.beta - dv


@dataclass
class Decision:
    b: np.ndarray
    objective: float
    lam_lo: np.ndarray  # multipliers of the lower-voltage rows
    lam_hi: np.ndarray  # multipliers of the upper-voltage rows
    nu: float = 0.0
    kkt_residual: float = 0.0
    iterations: int = 0
    solver: str = "centralized"
    fallback: bool = False
    active_box: np.ndarray = field(default=None)
    active_voltage: np.ndarray = field(default=None)


# -- costs ---------------------------------------------------------------------


def per_user_cost(b, tick):
    """f_n = (c0 + cp * 1'(b + l)) (b_n + l_n) - r cr b_n."""
    b = np.asarray(b, dtype=float)
    p = b + tick.l
    return (tick.c0 + tick.cp * p.sum()) * p - tick.r * tick.cr * b


def aggregate_cost(b, tick):
    """Potential of the per-period game: c0 1'p + cp/2 p'(I + 11')p - r cr 1'b."""
    b = np.asarray(b, dtype=float)
    p = b + tick.l
    return float(tick.c0 * p.sum() + 0.5 * tick.cp * (p @ p + p.sum() ** 2) - tick.r * tick.cr * b.sum())


# -- assembly --------------------------------------------------------------------


def sign_box(r, fleet):
    if r > 0:
        return np.zeros(len(fleet)), fleet.b_max
    return fleet.b_min, np.zeros(len(fleet))


def soc_box(s, fleet):
    lo = fleet.s_min - s
    hi = fleet.s_max - s
    # SoC sitting on a limit up to round-off must not empty the box
    lo = np.where(np.abs(lo) <= _BOX_SNAP, 0.0, lo)
    hi = np.where(np.abs(hi) <= _BOX_SNAP, 0.0, hi)
    return lo, hi


def assemble_step(state, tick, params, mode, fleet, sens, feeder, b_prev=None):
    """Build the per-period QP for ``mode``.

    ``params`` is a sequence of TunedParams (ignored for greedy). The queue
    vector is taken from ``state.s`` and each unit's tuned shift.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n = len(fleet)
    if mode == "greedy":
        w = np.zeros(n)
        x = np.zeros(n)
    else:
        w = np.array([p.w for p in params])
        x = state.s + np.array([p.gamma for p in params])

    if mode == "relaxed_sign":
        lo, hi = fleet.b_min, fleet.b_max
    else:
        lo, hi = sign_box(tick.r, fleet)
    if mode in ("greedy", "relaxed_sign"):
        s_lo, s_hi = soc_box(state.s, fleet)
        lo, hi = np.maximum(lo, s_lo), np.minimum(hi, s_hi)
    if np.any(lo > hi):
        bad = [int(i) + 1 for i in np.flatnonzero(lo > hi)]
        raise InfeasibleStepError(f"empty charging box for users {bad}")

    c = w * x - tick.r * tick.cr + tick.c0
    return StepProblem(
        c=c, cp=tick.cp, l=tick.l, q=tick.q, r=tick.r, lo=np.asarray(lo, dtype=float),
        hi=np.asarray(hi, dtype=float), R=sens.R, X=sens.X, alpha=feeder.alpha,
        beta=feeder.beta, v0=feeder.v0, c0=tick.c0, mode=mode,
        b_prev=None if b_prev is None else np.asarray(b_prev, dtype=float),
    )


# -- centralized solve -------------------------------------------------------------


def solve_centralized(problem):
    H, g, G, h = problem.qp_data()
    res = solve_qp(H, g, G, h)
    n = problem.n
    mu = res.multipliers
    b = res.x
    lam_lo = mu[2 * n:3 * n]
    lam_hi = mu[3 * n:]
    s_lo, s_hi = problem.voltage_slacks(b)
    return Decision(
        b=b,
        objective=problem.objective(b),
        lam_lo=lam_lo,
        lam_hi=lam_hi,
        nu=-problem.cp * float((b + problem.l).sum()),
        kkt_residual=res.kkt_residual,
        iterations=res.iterations,
        solver="centralized",
        active_box=(b <= problem.lo) | (b >= problem.hi),
        active_voltage=np.concatenate([s_lo <= 1e-12, s_hi <= 1e-12]),
    )


def policy_step(mode, state, tick, params, fleet, sens, feeder, solver="centralized",
                b_prev=None, dual_config=None, voltages=None):
    """Assemble and solve one period. ``solver`` is "centralized" or "distributed"."""
    problem = assemble_step(state, tick, params, mode, fleet, sens, feeder, b_prev)
    if solver == "centralized":
        return solve_centralized(problem)
    if solver == "distributed":
        from .dualnet import solve_distributed

        decision, _ = solve_distributed(problem, dual_config, voltages=voltages)
        return decision
    raise ValueError(f"unknown solver {solver!r}")


def zero_forced(x, params, r):
    """Users for which the characterization theorem forces b_n = 0.

    True where (x_n + g_lo/w_n >= 0 and r > 0) or (x_n + g_hi/w_n <= 0 and r < 0).
    """
    w = np.array([p.w for p in params])
    g_lo = np.array([p.g_lo for p in params])
    g_hi = np.array([p.g_hi for p in params])
    if r > 0:
        return x + g_lo / w >= 0
    return x + g_hi / w <= 0
