import math

import pytest

from tsclab.sim import (FlowPhase, FlowSpec, builtin_flow_names, expected_spawns,
                        load_flow, save_flow)

TABLE = {
    "jn1": ((0.3, 0.3, 0.4), [(1800, 9), (1800, 5)], (3, 4), 7831),
    "jn2": ((0.4, 0.4, 0.2), [(1800, 5.5), (1800, 5.5)], (3, 4), 9172),
    "jn3": ((0.5, 0.3, 0.2), [(1800, 8), (1800, 5)], (3, 4), 8186),
    "hz1": ((0.6, 0.15, 0.25), [(1200, 7), (1200, 10.2), (1200, 9.3)], (4, 4), 6684),
    "hz2": ((0.1, 0.7, 0.2), [(1200, 10), (1200, 11), (1200, 4)], (4, 4), 8444),
    "hz3": ((0.2, 0.3, 0.5), [(1200, 4), (1200, 10), (1200, 10)], (4, 4), 8433),
    "hz4": ((0.3, 0.4, 0.3), [(1200, 8), (1200, 5), (1200, 4)], (4, 4), 11012),
}


def test_builtin_names():
    assert builtin_flow_names() == ["hz1", "hz2", "hz3", "hz4", "jn1", "jn2", "jn3"]


@pytest.mark.parametrize("name", sorted(TABLE))
def test_builtin_values(name):
    probs, phases, grid, vehicles = TABLE[name]
    spec = load_flow(name)
    assert spec.turn_probs == probs
    assert [(p.duration, p.entry_interval) for p in spec.phases] == [
        (float(d), float(g)) for d, g in phases]
    assert spec.grid == grid
    assert spec.vehicles == vehicles
    spec.validate(3600)


def test_roundtrip(tmp_path):
    spec = load_flow("hz2")
    path = tmp_path / "copy.yaml"
    save_flow(spec, path)
    assert load_flow(path) == spec


def test_interval_schedule():
    spec = load_flow("jn3")
    assert spec.interval_at(0) == 8
    assert spec.interval_at(1799.9) == 8
    assert spec.interval_at(1800) == 5
    assert spec.interval_at(3599) == 5


def test_validation_errors():
    with pytest.raises(ValueError):
        FlowSpec("bad", (0.5, 0.5, 0.5), (FlowPhase(3600, 5),)).validate()
    with pytest.raises(ValueError):
        FlowSpec("bad", (0.5, 0.3, 0.2), (FlowPhase(1800, 5),)).validate()
    with pytest.raises(ValueError):
        FlowSpec("bad", (0.5, 0.3, 0.2), (FlowPhase(3600, 0),)).validate()


def test_missing_flow():
    with pytest.raises(FileNotFoundError):
        load_flow("nope")


def test_expected_spawns_closed_form():
    # jn3 on its 3x4 grid: (1800/8 + 1800/5) per entry, 14 entries
    assert expected_spawns(load_flow("jn3"), 14) == pytest.approx(8190.0)
    # infinite gap contributes nothing
    spec = FlowSpec("calm", (1, 0, 0), (FlowPhase(1800, math.inf), FlowPhase(1800, 10)))
    assert expected_spawns(spec, 4) == pytest.approx(4 * 180.0)
