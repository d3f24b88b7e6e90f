import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import brentq

from tdarc.pltime import (
    INFEASIBLE,
    ArrivalBeyondHorizon,
    ArrivalFunction,
    DegenerateHorizon,
    DepartureBeforeZero,
    QueryOutOfDomain,
    QueryStats,
    SpeedFunction,
    arrival_query_iterative,
    bucket_query,
    build_arrival_function,
    build_bucket_index,
    compose,
    departure_query_iterative,
    functions_equal,
    identity,
    lower_envelope,
    min_gap,
    tolerance,
)

from conftest import make_speed


def quadrature_arrival(v, d, t_dep):
    """Independent oracle: root-find x with integral of v over [t_dep, x] = d,
    the integral evaluated by adaptive quadrature."""

    def speed(t):
        return v.speed_right(t)

    def shortfall(x):
        pts = [b for b in v.breakpoints if t_dep < b < x]
        total, _ = quad(speed, t_dep, x, points=pts or None, limit=200,
                        epsabs=1e-12, epsrel=1e-12)
        return total - d

    hi = t_dep + d / min(v.speeds) + 1.0
    return brentq(shortfall, t_dep, hi, xtol=1e-10)


# ---------------------------------------------------------------- iterative


def test_arrival_two_piece_example():
    v = SpeedFunction([5.0], [1.0, 2.0], 20.0)
    assert arrival_query_iterative(v, 6.0, 0.0) == pytest.approx(5.5, abs=1e-12)


def test_arrival_constant_speed():
    v = SpeedFunction([], [2.0], 50.0)
    for t in (0.0, 3.7, 20.0):
        assert arrival_query_iterative(v, 4.0, t) == pytest.approx(t + 2.0, abs=1e-12)


def test_arrival_matches_quadrature(rng):
    for _ in range(40):
        v = make_speed(rng, pieces=8)
        d = float(rng.uniform(0.5, 30.0))
        t = float(rng.uniform(0.0, 60.0))
        got = arrival_query_iterative(v, d, t)
        assert got == pytest.approx(quadrature_arrival(v, d, t), abs=1e-8)


def test_arrival_beyond_cap():
    v = SpeedFunction([], [0.5], 10.0)
    with pytest.raises(ArrivalBeyondHorizon):
        arrival_query_iterative(v, 100.0, 0.0)  # would land at 200 > 2*horizon


def test_departure_constant_speed():
    v = SpeedFunction([], [2.0], 50.0)
    assert departure_query_iterative(v, 4.0, 10.0) == pytest.approx(8.0, abs=1e-12)


def test_departure_two_piece_inverse():
    v = SpeedFunction([5.0], [1.0, 2.0], 20.0)
    assert departure_query_iterative(v, 6.0, 5.5) == pytest.approx(0.0, abs=1e-12)


def test_departure_before_zero():
    v = SpeedFunction([], [1.0], 50.0)
    with pytest.raises(DepartureBeforeZero):
        departure_query_iterative(v, 10.0, 5.0)
    # boundary: arrival exactly reachable from 0 is fine
    assert departure_query_iterative(v, 10.0, 10.0) == 0.0


def test_round_trip_identity(rng):
    eps = tolerance(100.0)
    for _ in range(200):
        v = make_speed(rng)
        d = float(rng.uniform(0.5, 25.0))
        t = float(rng.uniform(0.0, 70.0))
        arr = arrival_query_iterative(v, d, t)
        back = departure_query_iterative(v, d, arr)
        assert abs(back - t) <= eps


# ------------------------------------------------------------- closed form


def test_build_constant_speed_single_piece():
    v = SpeedFunction([], [2.5], 80.0)
    f = build_arrival_function(v, 10.0)
    assert f.piece_count == 1
    assert f.domain_start == 0.0
    assert f.domain_end == pytest.approx(80.0 - 4.0, abs=1e-9)
    assert f.value(3.0) == pytest.approx(7.0, abs=1e-9)


def test_build_piece_count_bound(rng):
    for _ in range(50):
        h = int(rng.integers(2, 11))
        v = make_speed(rng, pieces=h)
        d = float(rng.uniform(1.0, 20.0))
        try:
            f = build_arrival_function(v, d)
        except DegenerateHorizon:
            continue
        assert f.piece_count - 1 <= 2 * (h - 1)


def test_build_seven_pieces_breakpoint_bound(rng):
    # h = 7 pieces -> at most 2(h-1) = 12 interior breakpoints
    for _ in range(20):
        v = make_speed(rng, pieces=7)
        f = build_arrival_function(v, float(rng.uniform(1.0, 15.0)))
        assert f.piece_count - 1 <= 12


def test_build_matches_iterative(rng):
    eps = tolerance(100.0)
    for _ in range(30):
        v = make_speed(rng)
        d = float(rng.uniform(0.5, 20.0))
        f = build_arrival_function(v, d)
        ts = rng.uniform(0.0, f.domain_end, size=200)
        for t in ts:
            assert abs(f.value(float(t)) - arrival_query_iterative(v, d, float(t))) <= eps


def test_build_degenerate_horizon():
    v = SpeedFunction([], [1.0], 10.0)
    with pytest.raises(DegenerateHorizon):
        build_arrival_function(v, 11.0)


def test_fifo_monotonicity(rng):
    for _ in range(20):
        v = make_speed(rng)
        f = build_arrival_function(v, float(rng.uniform(0.5, 20.0)))
        ts = np.linspace(f.domain_start, f.domain_end, 500)
        vals = f.values(ts)
        assert np.all(np.diff(vals) >= -1e-12)


# ----------------------------------------------------------------- envelope


def test_envelope_idempotent():
    f = ArrivalFunction([0.0, 10.0], [2.0, 12.0])
    env = lower_envelope(f, f)
    assert functions_equal(env, f, 1e-12)


def test_envelope_single_crossing():
    f = ArrivalFunction([0.0, 10.0], [2.0, 12.0])           # t + 2
    g = ArrivalFunction([0.0, 10.0], [1.0, 16.0])           # 1.5 t + 1
    env = lower_envelope(f, g)
    assert env.value(0.0) == pytest.approx(1.0, abs=1e-9)   # g below t=2
    assert env.value(2.0) == pytest.approx(4.0, abs=1e-9)   # crossing knot
    assert env.value(5.0) == pytest.approx(7.0, abs=1e-9)   # f beyond t=2
    assert any(abs(x - 2.0) < 1e-9 for x in env.x)


def test_envelope_with_infeasible_returns_other():
    f = ArrivalFunction([0.0, 10.0], [2.0, 12.0])
    assert lower_envelope(f, INFEASIBLE) is f
    assert lower_envelope(INFEASIBLE, f) is f


def test_envelope_pointwise_min(rng):
    for _ in range(20):
        v1 = make_speed(rng)
        v2 = make_speed(rng)
        f = build_arrival_function(v1, float(rng.uniform(1.0, 15.0)))
        g = build_arrival_function(v2, float(rng.uniform(1.0, 15.0)))
        env = lower_envelope(f, g)
        ts = rng.uniform(0.0, min(f.domain_end, g.domain_end), size=500)
        want = np.minimum(f.values(ts), g.values(ts))
        got = env.values(ts)
        assert np.max(np.abs(got - want)) <= 1e-9 * 100.0
        # dominance both ways
        assert np.all(got <= f.values(ts) + 1e-9)
        assert np.all(got <= g.values(ts) + 1e-9)


# ---------------------------------------------------------------- compose


def test_compose_identity_is_noop(rng):
    v = make_speed(rng)
    f = build_arrival_function(v, 5.0)
    comp = compose(f, identity(f.domain_end))
    assert functions_equal(comp, f, 1e-9 * 100.0)


def test_compose_affine():
    outer = ArrivalFunction([0.0, 20.0], [3.0, 23.0])       # t + 3
    inner = ArrivalFunction([0.0, 4.0], [1.0, 9.0])         # 2t + 1
    comp = compose(outer, inner)
    for t in (0.0, 1.0, 2.5, 4.0):
        assert comp.value(t) == pytest.approx(2 * t + 4.0, abs=1e-9)


def test_compose_pointwise(rng):
    for _ in range(20):
        f = build_arrival_function(make_speed(rng), float(rng.uniform(1.0, 12.0)))
        g = build_arrival_function(make_speed(rng), float(rng.uniform(1.0, 12.0)))
        comp = compose(g, f)  # g after f
        if comp.is_infeasible:
            continue
        ts = rng.uniform(comp.domain_start, comp.domain_end, size=500)
        for t in ts:
            t = float(t)
            assert comp.value(t) == pytest.approx(
                g.value(min(f.value(t), g.domain_end)), abs=1e-8)


def test_compose_empty_region_is_infeasible():
    outer = ArrivalFunction([0.0, 1.0], [0.5, 1.5])
    inner = ArrivalFunction([0.0, 1.0], [5.0, 6.0])  # range beyond outer domain
    assert compose(outer, inner).is_infeasible


# ------------------------------------------------------------------ buckets


def test_bucket_single_piece_all_zero():
    f = ArrivalFunction([0.0, 10.0], [4.0, 14.0])
    idx = build_bucket_index(f, bucket_count=8)
    assert idx.bucket_to_piece == [0] * 9


def test_bucket_boundary_tie_goes_left():
    f = ArrivalFunction([0.0, 5.0, 10.0], [1.0, 6.5, 12.0])
    idx = build_bucket_index(f, bucket_count=2, horizon=10.0)
    assert idx.bucket_to_piece == [0, 0, 1]


def test_bucket_entries_by_linear_scan(rng):
    for _ in range(10):
        f = build_arrival_function(make_speed(rng, pieces=8), 10.0)
        idx = build_bucket_index(f, bucket_count=64)
        width = idx.horizon / 64
        for i, p in enumerate(idx.bucket_to_piece):
            tb = i * width
            # scan: piece containing tb, ties to the earlier piece
            scan = 0
            for k in range(f.piece_count):
                if f.x[k] < tb <= f.x[k + 1]:
                    scan = k
                    break
            else:
                scan = 0 if tb <= f.x[0] else f.piece_count - 1
            assert p == scan


def test_bucket_query_matches_binary_search(rng):
    stats = QueryStats()
    for _ in range(5):
        f = build_arrival_function(make_speed(rng, pieces=9), 8.0)
        idx = build_bucket_index(f)
        ts = rng.uniform(0.0, f.domain_end, size=2000)
        for t in ts:
            t = float(t)
            assert bucket_query(f, idx, t, stats) == f.value(t)
    assert stats.total == 10000
    assert stats.direct_hits > 0


def test_bucket_query_out_of_domain():
    f = ArrivalFunction([0.0, 10.0], [4.0, 14.0])
    idx = build_bucket_index(f)
    with pytest.raises(QueryOutOfDomain):
        bucket_query(f, idx, 10.5)
    with pytest.raises(QueryOutOfDomain):
        bucket_query(f, idx, -0.5)
    assert bucket_query(f, idx, 0.0) == 4.0


# ------------------------------------------------------------------ min gap


def test_min_gap_constant_offset():
    f = ArrivalFunction([0.0, 10.0], [4.0, 14.0])
    assert min_gap(f) == pytest.approx(4.0)


def test_min_gap_attained_at_knot():
    f = ArrivalFunction([0.0, 5.0, 8.0], [6.0, 9.0, 13.0])  # gaps 6, 4, 5
    assert min_gap(f) == pytest.approx(4.0)


def test_min_gap_vs_dense_sampling(rng):
    for _ in range(20):
        f = build_arrival_function(make_speed(rng), float(rng.uniform(1.0, 15.0)))
        ts = np.linspace(f.domain_start, f.domain_end, 10_000)
        sampled = float(np.min(f.values(ts) - ts))
        g = min_gap(f)
        assert g <= sampled + 1e-12
        assert g == pytest.approx(sampled, abs=1e-3)  # dense grid approaches the knot min


# ----------------------------------------------------------- serialization


def test_knots_serialization_roundtrip():
    f = ArrivalFunction([0.0, 5.0, 8.0], [6.0, 9.0, 13.0])
    pairs = f.knots()
    assert pairs == [[0.0, 6.0], [5.0, 9.0], [8.0, 13.0]]
    g = ArrivalFunction([p[0] for p in pairs], [p[1] for p in pairs])
    assert functions_equal(f, g, 0.0)


def test_value_extended_slope_floor():
    f = ArrivalFunction([0.0, 10.0], [2.0, 10.0])  # slope 0.8 inside the domain
    assert f.value_extended(12.0) == pytest.approx(12.0, abs=1e-12)  # floor slope 1
    assert f.value_extended(5.0) == f.value(5.0)
