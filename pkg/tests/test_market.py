import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storagegame.errors import TraceParseError, ValidationError
from storagegame.market import (MarketTick, RandomConfig, SyntheticConfig, TraceScenario,
                                WorldBounds, format_traces, load_traces, parse_traces,
                                repeat_hourly, scenario_random, scenario_synthetic)
from support import random_config

N = 4


def synthetic(**kw):
    return SyntheticConfig(np.full(N, 0.02), np.full(N, 0.01), **kw)


def test_regulation_flips_every_15_slots():
    cfg = synthetic()
    assert [scenario_synthetic(cfg, t).r for t in range(15)] == [1] * 15
    assert [scenario_synthetic(cfg, t).r for t in range(15, 30)] == [-1] * 15
    assert scenario_synthetic(cfg, 30).r == 1


def test_price_levels_and_dwell():
    cfg = synthetic()
    levels = [scenario_synthetic(cfg, t).c0 for t in range(30)]
    assert set(levels) == {5.0, 20.0}
    assert levels[:15] == [5.0] * 10 + [20.0] * 5
    for t in range(30):
        tick = scenario_synthetic(cfg, t)
        assert tick.c0 == tick.cr == N * tick.cp


def test_swapped_dwell_reading():
    levels = [scenario_synthetic(synthetic().swapped(), t).c0 for t in range(15)]
    assert levels == [5.0] * 5 + [20.0] * 10


def test_equal_levels_give_constant_prices():
    cfg = synthetic(low=7.0, high=7.0)
    ticks = [scenario_synthetic(cfg, t) for t in range(40)]
    assert {(t.c0, t.cp, t.cr) for t in ticks} == {(7.0, 7.0 / N, 7.0)}


def test_synthetic_ticks_inside_bounds():
    cfg = synthetic()
    b = cfg.bounds()
    assert all(b.contains(scenario_synthetic(cfg, t)) for t in range(60))


def test_tick_rejects_bad_signal():
    with pytest.raises(ValidationError):
        MarketTick(0, 1.0, 1.0, 1.0, np.zeros(2), np.zeros(2))


def test_bounds_validation():
    z = np.zeros(2)
    with pytest.raises(ValidationError):
        WorldBounds(5, 1, 1, 2, 0, 1, z, z, z, z)
    with pytest.raises(ValidationError):
        WorldBounds(0, 1, 0, 2, 0, 1, z, z, z, z)


def test_random_signal_is_fair():
    cfg = random_config(12)
    r = np.array([scenario_random(cfg, 11, t).r for t in range(100_000)])
    assert abs(r.mean()) < 0.02


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**63 - 1), t=st.integers(0, 2**40))
def test_random_ticks_inside_bounds_and_replayable(seed, t):
    for n in (12, 33):
        cfg = random_config(n)
        tick = scenario_random(cfg, seed, t)
        assert cfg.bounds.contains(tick)
        assert tick == scenario_random(cfg, seed, t)


def test_random_streams_identical_per_seed():
    cfg = random_config(12)
    a = [scenario_random(cfg, 3, t) for t in range(200)]
    b = [scenario_random(cfg, 3, t) for t in range(200)]
    c = [scenario_random(cfg, 4, t) for t in range(200)]
    assert a == b
    assert a != c


def test_cp_tied_to_base_charge():
    base = random_config(12).bounds
    cfg = RandomConfig(base, "c0_over_n")
    assert cfg.bounds.cp_min == base.c0_min / 12
    for t in range(100):
        tick = scenario_random(cfg, 0, t)
        assert tick.cp == tick.c0 / 12
        assert cfg.bounds.contains(tick)


def _ticks(rng, count):
    return [MarketTick(int(rng.choice([-1, 1])), *rng.uniform(0, 10, 3), rng.uniform(0, 1, N),
                       rng.uniform(0, 1, N)) for _ in range(count)]


def test_trace_round_trip():
    ticks = _ticks(np.random.default_rng(0), 2)
    back, bounds = parse_traces(format_traces(ticks))
    assert back == ticks
    assert all(bounds.contains(t) for t in back)


def test_trace_round_trip_with_declared_bounds(tmp_path):
    ticks = _ticks(np.random.default_rng(1), 5)
    wide = WorldBounds(0, 10, 1e-9, 10, 0, 10, np.zeros(N), np.ones(N), np.zeros(N), np.ones(N))
    path = tmp_path / "t.csv"
    path.write_text(format_traces(ticks, wide, comments=["base 1 MVA"]))
    back, bounds = load_traces(path)
    assert back == ticks
    assert (bounds.c0_min, bounds.cp_min, bounds.cr_max) == (0, 1e-9, 10)
    np.testing.assert_array_equal(bounds.l_max, wide.l_max)


def test_declared_bounds_narrower_than_data():
    ticks = _ticks(np.random.default_rng(2), 3)
    narrow = WorldBounds(0, 10, 1e-9, 10, 0, 10, np.zeros(N), np.ones(N), np.zeros(N), np.ones(N))
    ticks[1] = MarketTick(1, 11.0, 1.0, 1.0, ticks[1].l, ticks[1].q)
    with pytest.raises(ValidationError, match="row 2"):
        parse_traces(format_traces(ticks, narrow))


@pytest.mark.parametrize("row,msg", [
    ("0,1,1,1,1,0.1,0.1,0.1", "fields"),
    ("0,0,1,1,1,0.1,0.1,0.1,0.1", "regulation"),
    ("0,1,-1,1,1,0.1,0.1,0.1,0.1", "negative"),
    ("0,1,x,1,1,0.1,0.1,0.1,0.1", "non-numeric"),
])
def test_trace_parse_errors(row, msg):
    with pytest.raises(TraceParseError, match=msg) as err:
        parse_traces("t,r,c0,cp,cr,l_1,l_2,q_1,q_2\n" + row + "\n")
    assert err.value.row == 1


def test_hourly_trace_repeated_twelve_times():
    hourly = _ticks(np.random.default_rng(3), 24)
    five_min = repeat_hourly(hourly, 12)
    assert len(five_min) == 288
    back, _ = parse_traces(format_traces(five_min))
    assert back == five_min
    assert all(back[12 * h + k] == hourly[h] for h in range(24) for k in range(12))
    scen = TraceScenario(back, None)
    assert scen(288) == hourly[0]
