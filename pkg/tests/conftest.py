import numpy as np
import pytest

from tdarc.network import Instance, Link, generate_speed_profiles
from tdarc.pltime import SpeedFunction


def make_speed(rng, pieces=None, horizon=100.0, lo=0.4, hi=1.6):
    """Random piecewise-constant speed profile for property tests."""
    if pieces is None:
        pieces = int(rng.integers(1, 9))
    if pieces == 1:
        bps = []
    else:
        bps = np.sort(rng.uniform(0.02 * horizon, 0.98 * horizon, size=pieces - 1))
        # keep breakpoints separated so queries are numerically well posed
        while np.any(np.diff(bps) < 1e-6 * horizon):
            bps = np.sort(rng.uniform(0.02 * horizon, 0.98 * horizon, size=pieces - 1))
    speeds = rng.uniform(lo, hi, size=pieces)
    return SpeedFunction(bps, speeds, horizon)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


INF = float("inf")


def brute_force_optimum(tb, vehicles=None):
    """Exhaustive optimum over all service-to-route assignments, service
    orders and modes, via earliest-completion DP over subsets (exact under
    FIFO: an earlier completion can never hurt a later extension)."""
    n = tb.n
    m = vehicles if vehicles is not None else tb.inst.vehicles
    cap = tb.inst.capacity
    load = [0.0] * (1 << n)
    for mask in range(1, 1 << n):
        s = (mask & -mask).bit_length() - 1
        load[mask] = load[mask & (mask - 1)] + tb.q[s]
    # f[mask][(s, mode)] = earliest completion after servicing mask, ending at s
    f = [dict() for _ in range(1 << n)]
    for s in range(n):
        if tb.q[s] > cap:
            continue
        for mo in range(tb.n_modes[s]):
            t1 = tb.travel(tb.depot, 0, s, mo, 0.0)
            if t1 == INF:
                continue
            t2 = tb.complete(s, mo, t1)
            if t2 < INF:
                key = (s, mo)
                cur = f[1 << s].get(key, INF)
                f[1 << s][key] = min(cur, t2)
    for mask in range(1, 1 << n):
        if not f[mask]:
            continue
        for (s, mo), t in f[mask].items():
            for s2 in range(n):
                if (mask >> s2) & 1 or load[mask] + tb.q[s2] > cap + 1e-9:
                    continue
                for mo2 in range(tb.n_modes[s2]):
                    t1 = tb.travel(s, mo, s2, mo2, t)
                    if t1 == INF:
                        continue
                    t2 = tb.complete(s2, mo2, t1)
                    if t2 == INF:
                        continue
                    key = (s2, mo2)
                    nxt = mask | (1 << s2)
                    if t2 < f[nxt].get(key, INF) - 1e-15:
                        f[nxt][key] = t2
    route_cost = [INF] * (1 << n)
    for mask in range(1, 1 << n):
        best = INF
        for (s, mo), t in f[mask].items():
            back = tb.travel(s, mo, tb.depot, 0, t)
            if back < best:
                best = back
        route_cost[mask] = best
    full = (1 << n) - 1
    dp = [[INF] * (1 << n) for _ in range(m + 1)]
    dp[0][0] = 0.0
    for k in range(1, m + 1):
        for mask in range(1 << n):
            base = dp[k - 1][mask]
            dp[k][mask] = min(dp[k][mask], base)
            if base == INF:
                continue
            rest = full ^ mask
            sub = rest
            while sub:
                if route_cost[sub] < INF:
                    cand = base + route_cost[sub]
                    if cand < dp[k][mask | sub]:
                        dp[k][mask | sub] = cand
                sub = (sub - 1) & rest
    return dp[m][full]


def constant_instance(links, num_vertices, speed=1.0, D=50.0, vehicles=2,
                      capacity=10.0, speeds=None, name="const"):
    """Instance with constant (or explicitly given) speed profiles."""
    travel = {}
    service = {}
    inst = Instance(name, num_vertices, links, vehicles, capacity, D)
    for l in links:
        for (d, _, _) in inst.directions(l):
            fn = (speeds or {}).get((l.id, d)) or SpeedFunction([], [speed], D)
            travel[(l.id, d)] = fn
            service[(l.id, d)] = SpeedFunction(fn.breakpoints,
                                               [0.7 * s for s in fn.speeds], D)
    return Instance(name, num_vertices, links, vehicles, capacity, D,
                    travel, service).validate()


def random_instance(seed, n_vertices=8, n_required=3, level="M", extra_links=3,
                    vehicles=2, capacity=None, arcs=False, name=None,
                    d_factor=None):
    """Small random connected instance with generated speed profiles.

    d_factor scales the default duration limit (slack for heavily perturbed
    scenarios)."""
    rng = np.random.default_rng(seed)
    links = []
    # random spanning tree keeps the graph connected
    for v in range(1, n_vertices):
        u = int(rng.integers(0, v))
        links.append((u, v))
    seen = {tuple(sorted(l)) for l in links}
    tries = 0
    while len(links) < n_vertices - 1 + extra_links and tries < 200:
        tries += 1
        u, v = (int(x) for x in rng.integers(0, n_vertices, size=2))
        if u == v or tuple(sorted((u, v))) in seen:
            continue
        seen.add(tuple(sorted((u, v))))
        links.append((u, v))
    req = rng.choice(len(links), size=min(n_required, len(links)), replace=False)
    req = set(int(i) for i in req)
    inst_links = []
    for i, (u, v) in enumerate(links):
        kind = "A" if (arcs and i in req and rng.random() < 0.5) else "E"
        demand = float(rng.integers(1, 6)) if i in req else 0.0
        dist = float(rng.uniform(1.0, 5.0))
        inst_links.append(Link(i, kind, u, v, round(dist, 3), demand))
    total_demand = sum(l.demand for l in inst_links)
    if capacity is None:
        capacity = max(6.0, np.ceil(total_demand / max(1, vehicles - 1) + 1))
    inst = Instance(name or f"rand{seed}", n_vertices, inst_links, vehicles,
                    float(capacity), float("inf"))
    duration = None
    if d_factor is not None:
        from tdarc.network import default_duration_limit
        duration = d_factor * default_duration_limit(inst)
    return generate_speed_profiles(inst, level, seed, duration)


def all_singletons_feasible(tb):
    """True when every service alone fits the horizon (well-posed instance)."""
    from tdarc.hgs import InfeasibleRoute, decode_route
    try:
        for s in range(tb.n):
            decode_route(tb, [s])
    except InfeasibleRoute:
        return False
    return True
