import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from telestage import floor
from telestage.errors import ConfigError, InfeasibleBudgetError, InvalidInputError
from telestage.floor import (FloorPlan, StageToFloor, attenuation, covering_lower_bound, db_to_gain,
                             greedy_placement, map_step, plan_actuators)
from telestage.haptics import StepEvent
from oracles import optimal_max_hop


def brute_max_attenuation(plan):
    worst = 0.0
    for r, c in itertools.product(range(plan.rows), range(plan.cols)):
        hops = min((max(abs(r - a), abs(c - b)) if plan.connectivity == 8 else abs(r - a) + abs(c - b))
                   for a, b in plan.actuators)
        worst = max(worst, plan.alpha * hops)
    return worst


def test_attenuation_examples():
    plan = FloorPlan(5, 5, ((2, 2),), alpha=6.0)
    assert attenuation(plan, (2, 2)) == 0.0
    assert attenuation(plan, (1, 3)) == 6.0
    assert db_to_gain(6.0) == pytest.approx(0.501, abs=1e-3)
    assert attenuation(FloorPlan(5, 5, ((2, 2),), alpha=3.0), (0, 2)) == 6.0
    assert attenuation(FloorPlan(5, 5, ((2, 2),), connectivity=4), (1, 3)) == 12.0
    with pytest.raises(InvalidInputError):
        attenuation(plan, (5, 0))


def test_plan_validation():
    with pytest.raises(ConfigError):
        FloorPlan(2, 2, ())
    with pytest.raises(ConfigError):
        FloorPlan(2, 2, ((2, 0),))
    with pytest.raises(ConfigError):
        FloorPlan(2, 2, ((0, 0),), alpha=0)
    with pytest.raises(ConfigError):
        FloorPlan(2, 2, ((0, 0), (0, 0)))
    with pytest.raises(ConfigError):
        FloorPlan(2, 2, ((0, 0),), connectivity=6)
    with pytest.raises(ConfigError):
        plan_actuators(2, 2, 0)


def test_two_by_two_single_actuator():
    plan = plan_actuators(2, 2, 1, alpha=6.0, max_db=6.0)
    assert len(plan.actuators) == 1 and plan.max_attenuation == 6.0


def test_stage_grid_128_actuators():
    plan = plan_actuators(16, 22, 128, alpha=6.0, max_db=6.0)
    assert len(plan.actuators) == 128
    assert plan.max_attenuation <= 6.0
    assert brute_max_attenuation(plan) == plan.max_attenuation
    assert 128 / 352 <= 1 / 2.75


@pytest.mark.parametrize("connectivity", [4, 8])
def test_greedy_within_one_hop_of_optimum(connectivity):
    for rows, cols in itertools.product(range(1, 5), repeat=2):
        for budget in range(1, rows * cols + 1):
            got = FloorPlan(rows, cols, tuple(greedy_placement(rows, cols, budget, connectivity)),
                            connectivity=connectivity).hop_map().max()
            assert got <= optimal_max_hop(rows, cols, budget, connectivity) + 1, (rows, cols, budget)


@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([4, 8]), st.data())
def test_reported_max_matches_exhaustive(rows, cols, conn, data):
    budget = data.draw(st.integers(1, rows * cols))
    plan = plan_actuators(rows, cols, budget, alpha=4.5, connectivity=conn)
    assert plan.max_attenuation == brute_max_attenuation(plan)
    assert len(plan.actuators) == budget


@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([4, 8]))
def test_budget_monotone(rows, cols, conn):
    worst = [plan_actuators(rows, cols, b, connectivity=conn).max_attenuation
             for b in range(1, rows * cols + 1)]
    assert all(b <= a for a, b in zip(worst, worst[1:]))
    assert worst[-1] == 0.0


def test_covering_bound():
    assert covering_lower_bound(16, 22, 1) == 6 * 8
    assert covering_lower_bound(3, 3, 1) == 1
    assert covering_lower_bound(4, 4, 0) == 16
    # the bound never exceeds what exhaustive search needs
    for rows, cols in ((3, 4), (4, 4)):
        for hops in (0, 1):
            need = next(b for b in range(1, rows * cols + 1) if optimal_max_hop(rows, cols, b) <= hops)
            assert covering_lower_bound(rows, cols, hops) <= need


def test_infeasible_budget():
    with pytest.raises(InfeasibleBudgetError) as err:
        plan_actuators(16, 22, 40, alpha=6.0, max_db=6.0)
    assert err.value.lower_bound == 48
    assert err.value.achieved_db > 6.0
    with pytest.raises(InfeasibleBudgetError):
        plan_actuators(4, 4, 1, alpha=6.0, max_db=6.0)


def test_map_floor_wide():
    plan = plan_actuators(16, 22, 128)
    cmds = map_step(StepEvent(1.25, 0, 3.0, 2.0, 2.0), plan)
    assert len(cmds) == 128 and all(c.gain == 1.0 and c.t == 1.25 for c in cmds)
    assert sorted(c.channel for c in cmds) == list(range(128))


def test_map_localized():
    plan = FloorPlan(5, 5, ((2, 2), (2, 3), (0, 0)), pitch=0.6)
    x, y = (2 + 0.5) * 0.6, (2 + 0.5) * 0.6
    cmds = {c.channel: c.gain for c in map_step(StepEvent(0.0, 1, 1.0, x, y), plan, "localized")}
    assert cmds[0] == 1.0
    assert cmds[1] == pytest.approx(0.6)
    assert 2 not in cmds  # 2.4 m away
    assert len({c.waveform_id for c in map_step(StepEvent(0.0, 1, 1.0, x, y), plan, "localized")}) == 1


def test_map_localized_degenerate_radius():
    plan = FloorPlan(4, 4, ((0, 0), (0, 2)), pitch=0.6)
    assert map_step(StepEvent(0.0, 0, 1.0, 0.9, 0.3), plan, "localized", radius=0.2) == []


def test_map_errors():
    plan = FloorPlan(4, 4, ((0, 0),))
    with pytest.raises(InvalidInputError):
        map_step(StepEvent(0.0, 0, 1.0, 10.0, 1.0), plan, "localized")
    with pytest.raises(ConfigError):
        map_step(StepEvent(0.0, 0, 1.0, 1.0, 1.0), plan, "spiral")
    # the stage transform moves an off-floor step onto the floor
    t = StageToFloor(1.0, (1.2, 1.2))
    assert map_step(StepEvent(0.0, 0, 1.0, -1.0, -1.0), plan, "localized", transform=t)


@given(st.floats(0, 2.4), st.floats(0, 2.4), st.floats(0.1, 3.0))
def test_localized_gains_in_range(x, y, radius):
    plan = FloorPlan(4, 4, ((0, 0), (1, 3), (3, 1)))
    for c in map_step(StepEvent(0.0, 0, 1.0, x, y), plan, "localized", radius=radius):
        assert 0 < c.gain <= 1


def test_plan_file_roundtrip(tmp_path):
    plan = plan_actuators(6, 7, 5, alpha=4.0, connectivity=4, pitch=0.5)
    floor.save_plan(tmp_path / "plan.txt", plan)
    text = (tmp_path / "plan.txt").read_text().splitlines()
    assert text[0] == "# pitch=0.5 alpha=4.0 connectivity=4"
    assert sum(row.count("A") for row in text[1:]) == 5 and all(len(r) == 7 for r in text[1:])
    back = floor.load_plan(tmp_path / "plan.txt")
    assert set(back.actuators) == set(plan.actuators)
    assert (back.alpha, back.pitch, back.connectivity) == (4.0, 0.5, 4)
    assert back.max_attenuation == plan.max_attenuation
    with pytest.raises(ConfigError):
        floor.parse_plan("A.\nA\n")
    with pytest.raises(ConfigError):
        floor.parse_plan("AX\n")


def test_commands_csv(tmp_path):
    plan = FloorPlan(2, 2, ((0, 0), (1, 1)))
    cmds = map_step(StepEvent(0.5, 2, 1.0), plan)
    floor.write_commands_csv(tmp_path / "c.csv", cmds)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["t,channel,gain,waveform_id", "0.500000,0,1.000000,sensor2",
                     "0.500000,1,1.000000,sensor2"]
