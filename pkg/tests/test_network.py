import math

import numpy as np
import pytest

from tdarc.network import (
    SPEED_BOUNDS,
    Instance,
    InvariantViolation,
    Link,
    ParseError,
    ScenarioSpec,
    default_duration_limit,
    generate_speed_profiles,
    parse_instance,
    perturb_scenario,
    serialize_instance,
    uniform_speed_copy,
)

from conftest import random_instance

MINIMAL_NATIVE = """TDARC 1
NAME tiny
VERTICES 2
EDGES 1
ARCS 0
REQUIRED_EDGES 1
REQUIRED_ARCS 0
VEHICLES 1
CAPACITY 10
DURATION_LIMIT 100
E 0 0 1 3 2
END
"""

CLASSIC_WITH_ARC = """NAME : toyarc
VERTICES : 3
DEPOT : 1
VEHICLES : 2
CAPACITY : 10
NODES COST DEMAND
1 2 4 3
2 3 2 0
ARCS
3 1 5 2
END
"""

CLASSIC_SPANISH = """NOMBRE : mini
VERTICES : 3
VEHICULOS : 1
CAPACIDAD : 7
LISTA_ARISTAS_REQ :
 ( 1, 2 ) coste 4 demanda 2
LISTA_ARISTAS_NOREQ :
 ( 2, 3 ) coste 3
DEPOSITO : 2
"""


def test_parse_minimal_native():
    inst = parse_instance(MINIMAL_NATIVE, "td_native")
    assert inst.num_services == 1
    assert inst.modes(0) == (1, 2)
    assert inst.duration_limit == 100
    assert not inst.has_profiles


def test_parse_classic_with_arc():
    inst = parse_instance(CLASSIC_WITH_ARC, "classic_carp")
    # depot remapped to 0; arc keeps orientation
    arc = [l for l in inst.links if l.kind == "A"][0]
    assert inst.modes(arc.id) == (1,)
    assert arc.required
    assert inst.num_services == 2
    assert math.isinf(inst.duration_limit)


def test_parse_classic_spanish_keywords():
    inst = parse_instance(CLASSIC_SPANISH, "classic_carp")
    assert inst.num_services == 1
    assert inst.capacity == 7
    # depot was vertex 2 -> remapped to 0
    req = inst.required_links()[0]
    assert 0 in (req.u, req.v)


def test_parse_demand_exceeds_capacity():
    bad = MINIMAL_NATIVE.replace("E 0 0 1 3 2", "E 0 0 1 3 12")
    with pytest.raises(InvariantViolation):
        parse_instance(bad, "td_native")


def test_parse_error_carries_line_number():
    bad = MINIMAL_NATIVE.replace("E 0 0 1 3 2", "E 0 0 1")
    with pytest.raises(ParseError) as err:
        parse_instance(bad, "td_native")
    assert "line" in str(err.value)


def test_roundtrip_minimal():
    inst = parse_instance(MINIMAL_NATIVE, "td_native")
    again = parse_instance(serialize_instance(inst), "td_native")
    assert inst == again


def test_roundtrip_generated_profiles():
    inst = parse_instance(MINIMAL_NATIVE, "td_native")
    gen = generate_speed_profiles(inst, "L", seed=7)
    again = parse_instance(serialize_instance(gen), "td_native")
    assert gen == again
    assert again.travel_speeds[(0, 0)].speeds == gen.travel_speeds[(0, 0)].speeds


def test_empty_required_serializes_but_fails_parse():
    inst = Instance("empty", 2, [Link(0, "E", 0, 1, 3.0, 0.0)], 1, 10.0, 50.0)
    text = serialize_instance(inst)  # writing is fine
    with pytest.raises(InvariantViolation):
        parse_instance(text, "td_native")


# -------------------------------------------------------------- generation


def test_generation_respects_level_bounds():
    inst = parse_instance(MINIMAL_NATIVE, "td_native")
    for level in ("L", "M", "H"):
        gen = generate_speed_profiles(inst, level, seed=3)
        for (lid, d), fn in gen.travel_speeds.items():
            assert fn.piece_count == 7
            for k, s in enumerate(fn.speeds):
                a, b = SPEED_BOUNDS[level][k]
                assert a <= s <= b


def test_generation_breakpoints_on_grid():
    inst = parse_instance(MINIMAL_NATIVE, "td_native")
    gen = generate_speed_profiles(inst, "M", seed=11)
    D = gen.duration_limit
    for fn in gen.travel_speeds.values():
        assert len(fn.breakpoints) == 6
        assert all(b2 > b1 for b1, b2 in zip(fn.breakpoints, fn.breakpoints[1:]))
        for b in fn.breakpoints:
            steps = b / (0.05 * D)
            assert abs(steps - round(steps)) < 1e-9
            assert 1 <= round(steps) <= 19


def test_service_speed_is_70_percent():
    gen = random_instance(5)
    for key, fn in gen.travel_speeds.items():
        svc = gen.service_speeds[key]
        assert svc.breakpoints == fn.breakpoints
        for s, sv in zip(fn.speeds, svc.speeds):
            assert sv == pytest.approx(0.7 * s, rel=1e-12)


def test_generation_deterministic():
    inst = parse_instance(MINIMAL_NATIVE, "td_native")
    a = generate_speed_profiles(inst, "H", seed=42)
    b = generate_speed_profiles(inst, "H", seed=42)
    assert a == b
    c = generate_speed_profiles(inst, "H", seed=43)
    assert a != c


def test_default_duration_limit_positive_and_binding():
    inst = parse_instance(CLASSIC_WITH_ARC, "classic_carp")
    D = default_duration_limit(inst)
    assert D > 0
    gen = generate_speed_profiles(inst, "L", seed=1)
    assert gen.duration_limit == pytest.approx(D)


# ------------------------------------------------------------ perturbation


def test_perturb_small_sigma_is_near_identity():
    gen = random_instance(9)
    spec = ScenarioSpec(sigma=1e-9, seed=4, count=2)
    for scen in perturb_scenario(gen, spec):
        for key, fn in scen.travel_speeds.items():
            base = gen.travel_speeds[key]
            assert np.allclose(fn.speeds, base.speeds, rtol=1e-8)


def test_perturb_bounds_sigma_06():
    gen = random_instance(10)
    spec = ScenarioSpec(sigma=0.6, seed=5, count=3)
    for scen in perturb_scenario(gen, spec):
        for key, fn in scen.travel_speeds.items():
            base = gen.travel_speeds[key]
            for s, b in zip(fn.speeds, base.speeds):
                c = s / b
                assert 0.4 - 1e-12 <= c <= 1.6 + 1e-12


def test_perturb_shares_factor_between_travel_and_service():
    gen = random_instance(11)
    spec = ScenarioSpec(sigma=0.2, seed=6, count=1)
    scen = perturb_scenario(gen, spec)[0]
    for key, fn in scen.travel_speeds.items():
        svc = scen.service_speeds[key]
        for s, sv in zip(fn.speeds, svc.speeds):
            assert sv == pytest.approx(0.7 * s, rel=1e-9)


def test_perturb_deterministic_byte_identical():
    gen = random_instance(12)
    spec = ScenarioSpec(sigma=0.2, seed=123, count=4)
    a = [serialize_instance(s) for s in perturb_scenario(gen, spec)]
    b = [serialize_instance(s) for s in perturb_scenario(gen, spec)]
    assert a == b


def test_scenario_spec_validation():
    with pytest.raises(InvariantViolation):
        ScenarioSpec(sigma=0.0, seed=1, count=1)
    with pytest.raises(InvariantViolation):
        ScenarioSpec(sigma=0.5, seed=1, count=0)


# -------------------------------------------------------------- uniform copy


def test_uniform_copy_time_average():
    gen = random_instance(13)
    uni = uniform_speed_copy(gen)
    speeds = {fn.speeds for fn in uni.travel_speeds.values()}
    assert len(speeds) == 1  # one shared constant speed
    (speed,) = speeds.pop()
    lo = min(min(fn.speeds) for fn in gen.travel_speeds.values())
    hi = max(max(fn.speeds) for fn in gen.travel_speeds.values())
    assert lo <= speed <= hi
