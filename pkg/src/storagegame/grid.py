"""
Radial feeder model: topology, linearized DistFlow sensitivities and an
exact backward/forward sweep used to check the linear model.

All quantities are per unit. Voltages are squared magnitudes.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DivergenceError, FeederParseError, TopologyError, ValidationError


@dataclass(frozen=True)
class Branch:
    parent: int
    child: int
    r: float
    x: float


@dataclass(frozen=True)
class Feeder:
    """Radial single-phase feeder rooted at bus 0.

    ``branches`` is ordered parent-before-child. ``alpha`` and ``beta`` are
    offsets of the squared voltage from ``v0`` (alpha < 0 < beta).
    """

    n_bus: int
    branches: tuple
    v0: float = 1.0
    alpha: float = -0.0199
    beta: float = 0.020

    def __post_init__(self):
        _validate(self)

    @property
    def parents(self):
        """parents[n-1] is the parent bus of bus n."""
        out = np.zeros(self.n_bus, dtype=int)
        for br in self.branches:
            out[br.child - 1] = br.parent
        return out

    def children(self):
        ch = {n: [] for n in range(self.n_bus + 1)}
        for br in self.branches:
            ch[br.parent].append(br.child)
        return ch


@dataclass(frozen=True)
class SensitivityMatrices:
    R: np.ndarray
    X: np.ndarray


def _validate(feeder):
    n = feeder.n_bus
    if n < 1:
        raise ValidationError("feeder needs at least one load bus")
    if not feeder.alpha < 0 < feeder.beta:
        raise ValidationError(f"voltage band must satisfy alpha < 0 < beta, got ({feeder.alpha}, {feeder.beta})")
    if feeder.v0 <= 0:
        raise ValidationError("v0 must be positive")
    if len(feeder.branches) != n:
        raise TopologyError(f"a radial feeder with {n} buses needs exactly {n} branches, got {len(feeder.branches)}")
    for br in feeder.branches:
        if br.r <= 0 or br.x <= 0:
            raise ValidationError(f"branch {br.parent}->{br.child}: impedance must be strictly positive")
    seen = {0}
    for br in feeder.branches:
        if br.parent not in seen:
            raise TopologyError(f"branch {br.parent}->{br.child} is not in parent-before-child order")
        if br.child in seen:
            raise TopologyError(f"bus {br.child} reached twice (cycle)")
        seen.add(br.child)
    if seen != set(range(n + 1)):
        raise TopologyError("bus numbering must be 0..N")


def order_branches(branches):
    """Return ``branches`` in breadth-first order from bus 0.

    Raises TopologyError on cycles, duplicate children or unreachable buses.
    """
    by_parent = {}
    children_seen = set()
    for br in branches:
        if br.child == 0:
            raise TopologyError("bus 0 is the substation and cannot be a child")
        if br.child in children_seen:
            raise TopologyError(f"bus {br.child} has more than one parent (cycle)")
        if br.parent == br.child:
            raise TopologyError(f"self-loop at bus {br.child}")
        children_seen.add(br.child)
        by_parent.setdefault(br.parent, []).append(br)

    ordered = []
    frontier = [0]
    visited = {0}
    while frontier:
        nxt = []
        for bus in frontier:
            for br in sorted(by_parent.get(bus, []), key=lambda b: b.child):
                if br.child in visited:
                    raise TopologyError(f"cycle through bus {br.child}")
                visited.add(br.child)
                ordered.append(br)
                nxt.append(br.child)
        frontier = nxt
    if len(ordered) != len(branches):
        missing = sorted(children_seen - visited)
        raise TopologyError(f"buses {missing} are not reachable from bus 0 (cycle or disconnected)")
    return ordered


def parse_feeder(text):
    """Parse feeder-file content.

    Line 1 (after comments) is ``v0=<f> alpha=<f> beta=<f>``; every other line
    is ``<parent> <child> <r_pu> <x_pu>``. ``#`` starts a comment.
    """
    header = None
    branches = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if header is None:
            header = {}
            for tok in line.split():
                if "=" not in tok:
                    raise FeederParseError(f"expected key=value in header, got {tok!r}", lineno)
                key, val = tok.split("=", 1)
                try:
                    header[key.strip()] = float(val)
                except ValueError:
                    raise FeederParseError(f"bad number {val!r}", lineno) from None
            missing = {"v0", "alpha", "beta"} - header.keys()
            if missing:
                raise FeederParseError(f"header missing {sorted(missing)}", lineno)
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FeederParseError(f"expected 4 fields, got {len(parts)}", lineno)
        try:
            parent, child = int(parts[0]), int(parts[1])
            r, x = float(parts[2]), float(parts[3])
        except ValueError:
            raise FeederParseError(f"cannot parse branch {line!r}", lineno) from None
        if parent < 0 or child < 0:
            raise FeederParseError("bus indices must be non-negative", lineno)
        if r <= 0 or x <= 0:
            raise ValidationError(f"line {lineno}: branch {parent}->{child} has nonpositive impedance")
        branches.append(Branch(parent, child, r, x))
    if header is None:
        raise FeederParseError("empty feeder file")
    if not branches:
        raise FeederParseError("feeder file has no branches")
    ordered = order_branches(branches)
    n = len(ordered)
    if {br.child for br in ordered} != set(range(1, n + 1)):
        raise TopologyError("buses must be numbered 1..N with N the branch count")
    return Feeder(n, tuple(ordered), header["v0"], header["alpha"], header["beta"])


def load_feeder(path):
    return parse_feeder(Path(path).read_text(encoding="utf-8"))


def format_feeder(feeder):
    lines = [f"v0={feeder.v0!r} alpha={feeder.alpha!r} beta={feeder.beta!r}"]
    lines += [f"{br.parent} {br.child} {br.r!r} {br.x!r}" for br in feeder.branches]
    return "\n".join(lines) + "\n"


def incidence_matrix(feeder, sign=1):
    """Reduced branch-bus incidence matrix A (rows follow ``feeder.branches``).

    ``sign=1`` puts +1 on the parent and -1 on the child; ``sign=-1`` flips it.
    """
    n = feeder.n_bus
    A = np.zeros((n, n))
    for k, br in enumerate(feeder.branches):
        if br.parent > 0:
            A[k, br.parent - 1] = sign
        A[k, br.child - 1] = -sign
    return A


def build_sensitivities(feeder, sign=1):
    """R = 2 (A^T diag(1/r) A)^-1 and X likewise."""
    A = incidence_matrix(feeder, sign)
    r = np.array([br.r for br in feeder.branches])
    x = np.array([br.x for br in feeder.branches])
    R = 2.0 * np.linalg.inv(A.T @ (A / r[:, None]))
    X = 2.0 * np.linalg.inv(A.T @ (A / x[:, None]))
    # the exact inverse is symmetric; remove round-off asymmetry
    R = 0.5 * (R + R.T)
    X = 0.5 * (X + X.T)
    return SensitivityMatrices(R, X)


def ldf_voltages(S, p, q, v0):
    """Squared voltages under the linearized DistFlow model: v = -Rp - Xq + v0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = S.R.shape[0]
    if p.shape != (n,) or q.shape != (n,):
        raise ValueError(f"expected injections of length {n}")
    return v0 - S.R @ p - S.X @ q


def voltage_margins(S, p, q, alpha, beta):
    """Per-bus (lower, upper) slack of alpha <= -Rp - Xq <= beta."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    dv = -(S.R @ p) - S.X @ q
    return dv - alpha, beta - dv


def base_load_feasible(S, l, q, alpha, beta, tol=0.0):
    """True if loads alone keep every bus inside the voltage band."""
    lo, hi = voltage_margins(S, l, q, alpha, beta)
    return bool(np.all(lo >= -tol) and np.all(hi >= -tol))


def ac_sweep(feeder, p, q, tol=1e-12, max_iter=200):
    """Exact branch-flow solution by backward/forward sweep.

    ``p``, ``q`` are constant-power consumptions at buses 1..N. Starts from a
    flat profile and stops when successive squared voltages change by less
    than ``tol``. Returns the squared magnitudes at buses 1..N.
    """
    sol = _sweep(feeder, p, q, tol, max_iter)
    return sol["v"]


def _sweep(feeder, p, q, tol=1e-12, max_iter=200):
    n = feeder.n_bus
    s_load = np.asarray(p, dtype=float) + 1j * np.asarray(q, dtype=float)
    if s_load.shape != (n,):
        raise ValueError(f"expected injections of length {n}")
    z = np.array([br.r + 1j * br.x for br in feeder.branches])
    parent = np.array([br.parent for br in feeder.branches])
    child = np.array([br.child for br in feeder.branches])

    V = np.full(n + 1, np.sqrt(feeder.v0) + 0j)
    v_old = np.abs(V) ** 2
    for it in range(1, max_iter + 1):
        inj = np.zeros(n + 1, dtype=complex)
        inj[1:] = np.conj(s_load / V[1:])
        I = np.zeros(n, dtype=complex)
        # backward: accumulate currents leaf to root
        acc = inj.copy()
        for k in range(n - 1, -1, -1):
            I[k] = acc[child[k]]
            acc[parent[k]] += acc[child[k]]
        # forward: voltage drops root to leaf
        for k in range(n):
            V[child[k]] = V[parent[k]] - z[k] * I[k]
        v = np.abs(V) ** 2
        if not np.all(np.isfinite(v)):
            break
        if np.max(np.abs(v - v_old)) <= tol:
            return {"v": v[1:], "V": V, "I": I, "iterations": it}
        v_old = v
    raise DivergenceError(f"backward/forward sweep did not converge in {max_iter} iterations (feeder overloaded?)")


def branch_flow_residual(feeder, p, q, V, I):
    """Largest residual of the branch-flow equations at phasors (V, I).

    Checks active/reactive power balance at every bus and the squared-voltage
    drop along every line, including the loss terms.
    """
    n = feeder.n_bus
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    S = np.zeros(n, dtype=complex)
    r = np.zeros(n)
    x = np.zeros(n)
    for k, br in enumerate(feeder.branches):
        S[br.child - 1] = V[br.parent] * np.conj(I[k])
        r[br.child - 1] = br.r
        x[br.child - 1] = br.x
    I_mag2 = np.zeros(n)
    for k, br in enumerate(feeder.branches):
        I_mag2[br.child - 1] = abs(I[k]) ** 2
    out_P = np.zeros(n + 1)
    out_Q = np.zeros(n + 1)
    for br in feeder.branches:
        out_P[br.parent] += S[br.child - 1].real
        out_Q[br.parent] += S[br.child - 1].imag
    res_p = -p - (out_P[1:] - S.real + r * I_mag2)
    res_q = -q - (out_Q[1:] - S.imag + x * I_mag2)
    v = np.abs(V) ** 2
    par = feeder.parents
    res_v = v[1:] - (v[par] - 2 * r * S.real - 2 * x * S.imag + (r**2 + x**2) * I_mag2)
    return float(max(np.max(np.abs(res_p)), np.max(np.abs(res_q)), np.max(np.abs(res_v))))


def ldf_error(feeder, p, q, S=None):
    """Max |sqrt(v_ldf) - sqrt(v_ac)| over buses, in pu voltage magnitude."""
    if S is None:
        S = build_sensitivities(feeder)
    v_ldf = ldf_voltages(S, p, q, feeder.v0)
    v_ac = ac_sweep(feeder, p, q)
    return float(np.max(np.abs(np.sqrt(v_ldf) - np.sqrt(v_ac))))
