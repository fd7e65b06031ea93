import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storagegame.controller import (StepProblem, aggregate_cost, assemble_step, per_user_cost,
                                    policy_step, solve_centralized, zero_forced)
from storagegame.errors import InfeasibleStepError
from storagegame.market import MarketTick
from storagegame.qp import solve_qp
from storagegame.sim import World, run
from storagegame.storage import Fleet, FleetState, initial_state, tune_fleet
from support import random_tree, realistic_problems, shipped_world, stressed_problems
from storagegame.grid import build_sensitivities


def scalar_problem(c, cp, l, lo, hi, R=1e-6):
    return StepProblem(c=np.array([c]), cp=cp, l=np.array([l]), q=np.zeros(1), r=1,
                       lo=np.array([lo]), hi=np.array([hi]), R=np.array([[R]]),
                       X=np.array([[R]]), alpha=-0.0199, beta=0.02)


def kkt_multipliers_ok(problem, decision, tol=1e-9):
    s_lo, s_hi = problem.voltage_slacks(decision.b)
    return (np.all(decision.lam_lo * np.abs(s_lo) <= tol)
            and np.all(decision.lam_hi * np.abs(s_hi) <= tol))


# -- assembly ------------------------------------------------------------------


def _world_state(mode, frac=0.5):
    world = shipped_world(12)
    params = None if mode == "greedy" else tune_fleet(
        world.fleet, world.bounds, "nonweighted" if mode == "nonweighted" else "weighted")
    s = world.fleet.s_min + frac * (world.fleet.s_max - world.fleet.s_min)
    gamma = np.zeros(12) if params is None else np.array([p.gamma for p in params])
    return world, params, FleetState(s, gamma)


def test_weighted_box_follows_signal():
    world, params, state = _world_state("weighted")
    for r in (1, -1):
        tick = MarketTick(r, 5, 1, 5, world.bounds.l_min, world.bounds.q_min)
        p = assemble_step(state, tick, params, "weighted", world.fleet, world.sens, world.feeder)
        if r > 0:
            np.testing.assert_array_equal(p.lo, 0)
            np.testing.assert_array_equal(p.hi, world.fleet.b_max)
        else:
            np.testing.assert_array_equal(p.lo, world.fleet.b_min)
            np.testing.assert_array_equal(p.hi, 0)
        w = np.array([q.w for q in params])
        np.testing.assert_allclose(p.c, w * state.x - r * 5 + 5, rtol=1e-15)


def test_greedy_full_battery_box_is_zero():
    world, _, state = _world_state("greedy", frac=1.0)
    tick = MarketTick(1, 5, 1, 5, world.bounds.l_min, world.bounds.q_min)
    p = assemble_step(state, tick, None, "greedy", world.fleet, world.sens, world.feeder)
    np.testing.assert_array_equal(p.lo, 0)
    np.testing.assert_array_equal(p.hi, 0)
    np.testing.assert_array_equal(solve_centralized(p).b, 0)


def test_relaxed_sign_box():
    world, params, state = _world_state("relaxed_sign", frac=0.99)
    tick = MarketTick(1, 5, 1, 5, world.bounds.l_min, world.bounds.q_min)
    p = assemble_step(state, tick, params, "relaxed_sign", world.fleet, world.sens, world.feeder)
    np.testing.assert_allclose(p.lo, world.fleet.b_min)
    np.testing.assert_allclose(p.hi, np.minimum(world.fleet.b_max, world.fleet.s_max - state.s))


def test_empty_box_is_infeasible():
    world, _, state = _world_state("greedy", frac=1.0)
    state.s[3] += 1e-6
    tick = MarketTick(1, 5, 1, 5, world.bounds.l_min, world.bounds.q_min)
    with pytest.raises(InfeasibleStepError, match=r"\[4\]"):
        assemble_step(state, tick, None, "greedy", world.fleet, world.sens, world.feeder)


def test_unknown_mode():
    world, params, state = _world_state("weighted")
    tick = MarketTick(1, 5, 1, 5, world.bounds.l_min, world.bounds.q_min)
    with pytest.raises(ValueError):
        assemble_step(state, tick, params, "lazy", world.fleet, world.sens, world.feeder)


def test_cp_must_be_positive():
    with pytest.raises(ValueError):
        scalar_problem(0.0, 0.0, 1.0, 0.0, 0.1)


# -- costs -----------------------------------------------------------------------


def test_costs_vanish_at_zero():
    tick = MarketTick(1, 3.0, 2.0, 1.0, np.zeros(4), np.zeros(4))
    np.testing.assert_array_equal(per_user_cost(np.zeros(4), tick), 0)
    assert aggregate_cost(np.zeros(4), tick) == 0


def test_per_user_cost_scalar():
    tick = MarketTick(1, 1.0, 1.0, 0.0, np.array([1.0]), np.zeros(1))
    np.testing.assert_allclose(per_user_cost([1.0], tick), [6.0], rtol=1e-15)


def test_aggregate_cost_scalar_doubles_quadratic():
    tick = MarketTick(-1, 2.0, 3.0, 4.0, np.array([0.5]), np.zeros(1))
    b = 0.25
    p = b + 0.5
    assert aggregate_cost([b], tick) == pytest.approx(2.0 * p + 3.0 * p**2 + 4.0 * b, rel=1e-15)


def test_regulation_benefit_nonnegative_when_aligned():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r = int(rng.choice([-1, 1]))
        b = r * rng.uniform(0, 1, 5)
        cr = rng.uniform(0, 20)
        assert np.all(r * cr * b >= 0)
        np.testing.assert_allclose(r * cr * b, cr * np.abs(b))


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40))
def test_potential_identity(seed, n):
    rng = np.random.default_rng(seed)
    tick = MarketTick(int(rng.choice([-1, 1])), rng.uniform(0, 50), rng.uniform(1e-3, 5),
                      rng.uniform(0, 50), rng.uniform(0, 2, n), rng.uniform(0, 1, n))
    b = rng.uniform(-1, 1, n)
    k = int(rng.integers(n))
    dev = b.copy()
    dev[k] = rng.uniform(-1, 1)
    df = aggregate_cost(b, tick) - aggregate_cost(dev, tick)
    dfn = per_user_cost(b, tick)[k] - per_user_cost(dev, tick)[k]
    assert abs(df - dfn) <= 1e-9 * max(1.0, abs(aggregate_cost(b, tick)))


# -- centralized solver -------------------------------------------------------


def test_scalar_stationary_point_clipped():
    # c = w x - r cr + c0 = 1 - 20 + 5
    p = scalar_problem(-14.0, 2.0, 1.0, 0.0, 0.1)
    d = solve_centralized(p)
    assert d.b[0] == 0.1
    wide = scalar_problem(-14.0, 2.0, 1.0, 0.0, 10.0)
    assert solve_centralized(wide).b[0] == pytest.approx(2.5, rel=1e-12)


def _grid_min(problem, axes):
    B = np.array(list(itertools.product(*axes)))
    dv = -(B @ problem.R.T) - problem.background()
    B = B[np.all(dv >= problem.alpha, axis=1) & np.all(dv <= problem.beta, axis=1)]
    P = B + problem.l
    f = B @ problem.c + 0.5 * problem.cp * (np.sum(P * P, axis=1) + P.sum(axis=1) ** 2)
    i = int(np.argmin(f))
    return B[i], f[i]


def _grid_oracle(problem, step=1e-3, levels=4, half=20):
    """Exhaustive search on a step-1e-3 grid of the box, then zoomed re-gridding around
    the incumbent (factor 10 per level). Returns the coarse and refined minima."""
    def axis(lo, hi, step, centre=None):
        if centre is not None:
            lo, hi = max(lo, centre - half * step), min(hi, centre + half * step)
        pts = np.arange(lo, hi, step)
        return np.unique(np.append(pts, [lo, hi]))

    coarse = _grid_min(problem, [axis(lo, hi, step) for lo, hi in zip(problem.lo, problem.hi)])
    b, f = coarse
    for _ in range(levels):
        step /= 10
        b, f = _grid_min(problem, [axis(lo, hi, step, c)
                                   for lo, hi, c in zip(problem.lo, problem.hi, b)])
    return coarse, (b, f)


def _small_problem(rng, n, tight=False):
    """Random N <= 3 instance; ``tight`` loads the feeder close to the lower voltage
    limit and lets users charge, so that voltage rows bind."""
    while True:
        f = random_tree(rng, n)
        S = build_sensitivities(f)
        l = rng.uniform(0.05, 0.3, n)
        r = 1 if tight else int(rng.choice([-1, 1]))
        bmax = rng.uniform(0.02, 0.06 if n == 3 else 0.2, n)
        if tight:
            l *= rng.uniform(0.8, 0.97) * -f.alpha / np.max(S.R @ l + S.X @ (0.4 * l))
            bmax = np.full(n, 0.06 if n == 3 else 0.2)
        lo, hi = (np.zeros(n), bmax) if r > 0 else (-bmax, np.zeros(n))
        c = rng.uniform(-5, 5, n) - (10 if tight else 0)
        p = StepProblem(c=c, cp=rng.uniform(1, 10), l=l, q=0.4 * l, r=r,
                        lo=lo, hi=hi, R=S.R, X=S.X, alpha=f.alpha, beta=f.beta)
        u = p.background()
        if np.all(-u >= p.alpha) and np.all(-u <= p.beta):
            return p


@pytest.mark.parametrize("seed", range(40))
def test_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    p = _small_problem(rng, 2 if seed % 2 else 3)
    d = solve_centralized(p)
    (b_grid, f_grid), (b_fine, f_fine) = _grid_oracle(p)
    f_opt = p.objective(d.b) - p.c0 * p.l.sum()
    # the exact optimum can only be better than any grid point
    assert f_opt <= min(f_grid, f_fine) + 1e-12
    assert np.max(np.abs(d.b - b_grid)) <= 1e-3
    assert abs(f_fine - f_opt) <= 1e-6 * max(1.0, abs(f_opt))
    # strong convexity (modulus cp) bounds the distance to any grid point
    assert np.max(np.abs(d.b - b_fine)) <= np.sqrt(2 * max(f_fine - f_opt, 0) / p.cp) + 1e-12


@pytest.mark.parametrize("n", [12, 33])
def test_kkt_and_complementarity(n):
    for p in realistic_problems(n, 40, 3) + stressed_problems(n, 40, 4):
        d = solve_centralized(p)
        assert d.kkt_residual <= 1e-9
        assert np.all(d.b >= p.lo) and np.all(d.b <= p.hi)
        s_lo, s_hi = p.voltage_slacks(d.b)
        assert min(s_lo.min(), s_hi.min()) >= -1e-9
        assert np.all(d.lam_lo >= 0) and np.all(d.lam_hi >= 0)
        assert kkt_multipliers_ok(p, d)
        if p.mode in ("weighted", "nonweighted", "greedy"):
            assert np.all(p.r * d.b >= 0)


def test_permutation_invariance():
    rng = np.random.default_rng(8)
    for p in stressed_problems(12, 20, 9):
        perm = rng.permutation(12)
        q = StepProblem(c=p.c[perm], cp=p.cp, l=p.l[perm], q=p.q[perm], r=p.r, lo=p.lo[perm],
                        hi=p.hi[perm], R=p.R[np.ix_(perm, perm)], X=p.X[np.ix_(perm, perm)],
                        alpha=p.alpha, beta=p.beta)
        np.testing.assert_allclose(solve_centralized(q).b, solve_centralized(p).b[perm], atol=1e-9)


def test_deterministic():
    p = stressed_problems(33, 1, 0)[0]
    a, b = solve_centralized(p), solve_centralized(p)
    assert np.array_equal(a.b, b.b)


def test_infeasible_voltage_band():
    p = scalar_problem(0.0, 1.0, 1.0, 0.0, 0.1, R=0.05)
    # base load alone already pulls the voltage below the band and b >= 0 cannot help
    with pytest.raises(InfeasibleStepError):
        solve_centralized(p)


# -- characterization theorem ---------------------------------------------------


@pytest.mark.parametrize("r", [1, -1])
def test_zero_forced_users_do_not_move(r):
    world = shipped_world(12)
    params = tune_fleet(world.fleet, world.bounds, "weighted")
    rng = np.random.default_rng(1 if r > 0 else 2)
    hits = 0
    for t in range(300):
        tick = world.tick(t, 5)
        tick = MarketTick(r, tick.c0, tick.cp, tick.cr, tick.l, tick.q)
        s = rng.uniform(world.fleet.s_min, world.fleet.s_max)
        state = FleetState(s, np.array([p.gamma for p in params]))
        forced = zero_forced(state.x, params, r)
        hits += forced.sum()
        d = policy_step("weighted", state, tick, params, world.fleet, world.sens, world.feeder)
        assert np.all(np.abs(d.b[forced]) <= 1e-9)
    assert hits > 100


def test_greedy_empties_full_batteries_at_low_price():
    world = shipped_world(12, "scenario1_12.json")
    full = World(world.feeder, Fleet(world.fleet.units, world.fleet.s_max), world.bounds, world.tick)
    spent = {}
    for mode in ("greedy", "weighted"):
        _, recs = run(full, mode, T=30)
        low = -sum(r.b.sum() for r in recs[15:25])    # r = -1, price 5
        high = -sum(r.b.sum() for r in recs[25:30])   # r = -1, price 20
        spent[mode] = (low, high)
    total = world.fleet.s_max.sum()
    # greedy sells almost everything at the low price; the queue-weighted policy holds back
    assert spent["greedy"][0] > 0.9 * total
    assert spent["weighted"][0] < spent["greedy"][0]
    assert spent["weighted"][1] > spent["greedy"][1]


# -- QP solver on its own --------------------------------------------------------


def test_qp_against_projected_gradient_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        A = rng.normal(size=(n, n))
        H = A @ A.T + 0.5 * np.eye(n)
        g = rng.normal(size=n)
        lo, hi = -rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        G = np.vstack([np.eye(n), -np.eye(n)])
        h = np.concatenate([hi, -lo])
        x = solve_qp(H, g, G, h).x
        # box-constrained oracle: projected gradient to a fixed point
        y = np.zeros(n)
        step = 1.0 / np.linalg.eigvalsh(H).max()
        for _ in range(20000):
            y = np.clip(y - step * (H @ y + g), lo, hi)
        np.testing.assert_allclose(x, y, atol=1e-8)


def test_qp_degenerate_equal_bounds():
    n = 4
    H = 2 * np.eye(n) + 1
    G = np.vstack([np.eye(n), -np.eye(n), np.ones((1, n))])
    h = np.concatenate([np.zeros(n), np.zeros(n), [0.0]])
    res = solve_qp(H, -np.ones(n), G, h)
    np.testing.assert_array_equal(res.x, 0)
    assert res.kkt_residual <= 1e-12


def test_initial_state_uses_shift():
    world = shipped_world(12)
    params = tune_fleet(world.fleet, world.bounds)
    st0 = initial_state(world.fleet, params)
    np.testing.assert_array_equal(st0.x - st0.s, [p.gamma for p in params])
