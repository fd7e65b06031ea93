"""Shared builders and independent oracles for the test suite."""

import json
from importlib.resources import files

import numpy as np

from storagegame.cli import load_scenario
from storagegame.controller import MODES, StepProblem, assemble_step
from storagegame.errors import InfeasibleStepError
from storagegame.grid import Branch, Feeder, build_sensitivities, load_feeder
from storagegame.market import RandomConfig, WorldBounds
from storagegame.storage import FleetState, load_fleet, tune_fleet

DATA = files("storagegame") / "data"
FEEDERS = {12: ("feeder12.txt", "fleet12.csv", "random_12.json"),
           33: ("feeder33.txt", "fleet33.csv", "random_33.json")}


def data(name):
    return DATA / name


def shipped_world(n, scenario=None):
    feeder_name, fleet_name, random_name = FEEDERS[n]
    feeder = load_feeder(data(feeder_name))
    fleet = load_fleet(data(fleet_name))
    world, _ = load_scenario(scenario or random_name, feeder, fleet)
    return world


def random_config(n):
    spec = json.loads(data(FEEDERS[n][2]).read_text())
    bounds = WorldBounds(spec["c0"][0], spec["c0"][1], spec["cp"][0], spec["cp"][1],
                         spec["cr"][0], spec["cr"][1], spec["l_min"], spec["l_max"],
                         spec["q_min"], spec["q_max"])
    return RandomConfig(bounds, spec["cp_mode"])


def realistic_problems(n, count, seed):
    """StepProblems as the simulator would build them: shipped fleet, random
    scenario tick, random SoC, random mode."""
    world = shipped_world(n)
    fleet = world.fleet
    params = {m: tune_fleet(fleet, world.bounds, m) for m in ("weighted", "nonweighted")}
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        tick = world.tick(int(rng.integers(1 << 30)), seed)
        mode = MODES[rng.integers(len(MODES))]
        pr = params.get(mode, params["weighted"])
        s = rng.uniform(fleet.s_min, fleet.s_max)
        state = FleetState(s, np.array([p.gamma for p in pr]))
        try:
            out.append(assemble_step(state, tick, pr, mode, fleet, world.sens, world.feeder))
        except InfeasibleStepError:
            continue
    return out


def stressed_problems(n, count, seed):
    """Heavier loads, wider boxes and spread linear terms, so that voltage rows bind often."""
    feeder = load_feeder(data(FEEDERS[n][0]))
    S = build_sensitivities(feeder)
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        scale = rng.uniform(0.5, 3.0)
        l = rng.uniform(0.005, 0.04, n) * scale * (12 / n)
        q = 0.48 * l
        r = int(rng.choice([-1, 1]))
        bmax = rng.uniform(0.005, 0.06, n) * (12 / n)
        lo, hi = (np.zeros(n), bmax) if r > 0 else (-bmax, np.zeros(n))
        p = StepProblem(c=rng.uniform(-30, 30, n), cp=rng.uniform(5, 20) / n, l=l, q=q, r=r,
                        lo=lo, hi=hi, R=S.R, X=S.X, alpha=feeder.alpha, beta=feeder.beta)
        u = p.background()
        if np.any(-u < feeder.alpha) or np.any(-u > feeder.beta):
            continue
        out.append(p)
    return out


def random_tree(rng, n, alpha=-0.0199, beta=0.020):
    """Random radial feeder on buses 0..n with parent-before-child numbering."""
    branches = []
    for child in range(1, n + 1):
        parent = int(rng.integers(0, child))
        branches.append(Branch(parent, child, float(rng.uniform(1e-3, 5e-2)),
                               float(rng.uniform(1e-3, 5e-2))))
    return Feeder(n, tuple(branches), 1.0, alpha, beta)


def path_sensitivity(feeder, attr="r"):
    """2 * (sum of impedances on the common part of the root paths), by enumeration."""
    parent = {br.child: br for br in feeder.branches}

    def path(bus):
        edges = set()
        while bus != 0:
            br = parent[bus]
            edges.add((br.parent, br.child))
            bus = br.parent
        return edges

    paths = [path(i) for i in range(1, feeder.n_bus + 1)]
    imp = {(br.parent, br.child): getattr(br, attr) for br in feeder.branches}
    n = feeder.n_bus
    M = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            M[i, j] = 2.0 * sum(imp[e] for e in paths[i] & paths[j])
    return M
