"""
Dense primal active-set solver for small strictly convex QPs

    min  0.5 x'Hx + g'x   s.t.  G x <= h.

Used as the centralized reference solver. Rows that are simple variable
bounds are detected so that a variable held at a bound is set to the bound
value exactly, which keeps "b_n = 0" decisions exact.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import InfeasibleStepError


@dataclass
class QPResult:
    x: np.ndarray
    multipliers: np.ndarray  # one per row of G, >= 0
    iterations: int
    kkt_residual: float


def _bound_rows(G):
    """For each row: (var index, sign) if it is +/- e_i, else (-1, 0)."""
    info = []
    for row in G:
        nz = np.flatnonzero(row)
        if nz.size == 1 and abs(row[nz[0]]) == 1.0:
            info.append((int(nz[0]), float(row[nz[0]])))
        else:
            info.append((-1, 0.0))
    return info


def find_feasible(G, h, x0=None, tol=1e-12):
    """Return a point with G x <= h, preferring ``x0`` when it is feasible."""
    n = G.shape[1]
    if x0 is None:
        x0 = np.zeros(n)
    if np.all(G @ x0 <= h + tol):
        return x0
    res = linprog(np.zeros(n), A_ub=G, b_ub=h, bounds=[(None, None)] * n, method="highs")
    if res.status != 0:
        raise InfeasibleStepError("constraint set is empty")
    return res.x


def kkt_residual(H, g, G, h, x, mu):
    stat = H @ x + g + G.T @ mu
    slack = h - G @ x
    return float(max(
        np.max(np.abs(stat)),
        max(0.0, -np.min(slack)) if slack.size else 0.0,
        np.max(np.abs(mu * slack)) if slack.size else 0.0,
        max(0.0, -np.min(mu)) if mu.size else 0.0,
    ))


def solve_qp(H, g, G, h, x0=None, max_iter=None, tol=1e-12):
    """Primal active-set method from a feasible start (Nocedal & Wright, Alg. 16.3)."""
    n = H.shape[0]
    m = G.shape[0]
    x = find_feasible(G, h, x0).astype(float).copy()
    bounds = _bound_rows(G)
    scale = max(1.0, float(np.max(np.abs(g))), float(np.max(np.abs(H))))
    if max_iter is None:
        max_iter = 10 * (n + m) + 50

    work = []
    for it in range(1, max_iter + 1):
        Gw = G[work]
        k = len(work)
        K = np.zeros((n + k, n + k))
        K[:n, :n] = H
        K[:n, n:] = Gw.T
        K[n:, :n] = Gw
        rhs = np.concatenate([-(H @ x + g), np.zeros(k)])
        try:
            sol = np.linalg.solve(K, rhs)
            exact = np.all(np.isfinite(sol)) and np.allclose(K @ sol, rhs, rtol=1e-9, atol=1e-12 * scale)
        except np.linalg.LinAlgError:
            exact = False
        if not exact:
            # dependent working rows (e.g. lo == hi): least-squares multipliers
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        p = sol[:n]
        lam = sol[n:]
        if k >= n and np.linalg.matrix_rank(Gw) == n:
            # vertex: the step is zero up to round-off
            p = np.zeros(n)

        if np.max(np.abs(p), initial=0.0) <= tol * max(1.0, np.max(np.abs(x), initial=0.0)):
            if k == 0 or lam.min() >= -tol * scale:
                mu = np.zeros(m)
                mu[work] = np.maximum(lam, 0.0)
                return QPResult(x, mu, it, kkt_residual(H, g, G, h, x, mu))
            work.pop(int(np.argmin(lam)))
            continue

        Gp = G @ p
        step = 1.0
        block = -1
        in_work = np.zeros(m, dtype=bool)
        in_work[work] = True
        slack = np.maximum(h - G @ x, 0.0)
        # rows dependent on the working set have G p = 0 up to round-off and never block
        row_norm = np.linalg.norm(G, axis=1)
        blocking = Gp > 1e-12 * row_norm * np.linalg.norm(p)
        for i in np.flatnonzero(blocking & ~in_work):
            a = slack[i] / Gp[i]
            if a < step:
                step, block = a, int(i)
        x = x + step * p
        if block >= 0:
            work.append(block)
        for i in work:
            var, sgn = bounds[i]
            if var >= 0:
                x[var] = h[i] / sgn
    raise RuntimeError(f"active-set QP did not terminate in {max_iter} iterations")
