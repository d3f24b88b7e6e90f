"""Hybrid genetic search over mode-free service sequences.

Routes are sequences of services without orientation choices; a dynamic
program picks optimal modes at every evaluation.  The local search screens
each candidate move with a concatenation-based duration lower bound built
from per-sequence mode-pair matrices and only decodes the survivors.

One search thread per run; the profile matrix is shared read-only, so
independent runs with different seeds may execute concurrently.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field

from .tables import ServiceTables

INF = math.inf
EPS_IMPROVE = 1e-9


class InfeasibleRoute(Exception):
    """No mode assignment completes the route within the horizon."""


# --------------------------------------------------------------- decoding


class DecodedRoute:
    __slots__ = ("duration", "modes", "completions", "table")

    def __init__(self, duration, modes, completions, table):
        self.duration = duration
        self.modes = modes              # 0-based mode per service
        self.completions = completions  # completion time per service
        self.table = table              # per-layer tuple of mode completions


def decode_route(tb: ServiceTables, seq, extended: bool = False) -> DecodedRoute:
    """Optimal-mode evaluation of one route (depot implicit at both ends).

    Propagates per-mode completion times through the layered mode graph and
    returns the minimal depot-return time; ties pick the lower mode index.
    With extended=True, queries extrapolate past the horizon so that
    violating routes still get a finite (penalizable) duration.
    """
    travel = tb.travel_extended if extended else tb.travel
    complete = tb.complete_extended if extended else tb.complete
    depot = tb.depot
    prev = (0.0,)
    prev_elem = depot
    layers = [prev]
    choices = []
    for s in seq:
        cur = []
        chs = []
        for l in range(tb.n_modes[s]):
            best = INF
            bk = -1
            for k, tk in enumerate(prev):
                if tk == INF:
                    continue
                t1 = travel(prev_elem, k, s, l, tk)
                if t1 == INF:
                    continue
                t2 = complete(s, l, t1)
                if t2 < best:
                    best = t2
                    bk = k
            cur.append(best)
            chs.append(bk)
        prev = tuple(cur)
        prev_elem = s
        layers.append(prev)
        choices.append(chs)
    duration = INF
    last_choice = -1
    for k, tk in enumerate(prev):
        if tk == INF:
            continue
        t1 = travel(prev_elem, k, depot, 0, tk)
        if t1 < duration:
            duration = t1
            last_choice = k
    if duration == INF:
        if extended:
            # unreachable even with extrapolation (no path within the
            # horizon at any time): infinite cost, caller penalizes
            return DecodedRoute(INF, [0] * len(seq), [INF] * len(seq), layers)
        raise InfeasibleRoute(f"route {list(seq)} cannot finish within the horizon")
    modes = [0] * len(seq)
    completions = [0.0] * len(seq)
    k = last_choice
    for i in range(len(seq) - 1, -1, -1):
        modes[i] = k
        completions[i] = layers[i + 1][k]
        k = choices[i][k]
    return DecodedRoute(duration, modes, completions, layers)


def fixed_route_duration(tb: ServiceTables, oriented) -> float:
    """Duration of a route with fixed service orientations.

    oriented: list of (service, mode) with 0-based modes.  Raises
    InfeasibleRoute when any step leaves the time domain.
    """
    t = 0.0
    prev_elem, prev_mode = tb.depot, 0
    for (s, m) in oriented:
        t1 = tb.travel(prev_elem, prev_mode, s, m, t)
        t = tb.complete(s, m, t1) if t1 != INF else INF
        if t == INF:
            raise InfeasibleRoute(f"step to service {s} leaves the horizon")
        prev_elem, prev_mode = s, m
    back = tb.travel(prev_elem, prev_mode, tb.depot, 0, t)
    if back == INF:
        raise InfeasibleRoute("depot return leaves the horizon")
    return back


# --------------------------------------------------------- sequence bounds

# A sequence bound is (first_elem, last_elem, m00, m01, m10, m11) where
# m[k][l] lower-bounds the travel+service time over the sequence started in
# mode k and finished in mode l; invalid mode combinations hold +inf.


def single_bound(tb: ServiceTables, s: int):
    g0 = tb.svc_gap[s][0]
    g1 = tb.svc_gap[s][1] if tb.n_modes[s] > 1 else INF
    return (s, s, g0, INF, INF, g1)


def depot_bound(tb: ServiceTables):
    return (tb.depot, tb.depot, 0.0, INF, INF, INF)


def seq_concat(tb: ServiceTables, a, b):
    """Bound for sequence a followed by sequence b: minimizes over the join
    modes using the precomputed quickest-path min gaps."""
    ga = tb.gap[a[1]]
    bf = b[0]
    g0 = ga[0][bf]
    g1 = ga[1][bf]
    a00, a01, a10, a11 = a[2], a[3], a[4], a[5]
    b00, b01, b10, b11 = b[2], b[3], b[4], b[5]
    t00 = min(a00 + g0[0], a01 + g1[0])
    t01 = min(a00 + g0[1], a01 + g1[1])
    t10 = min(a10 + g0[0], a11 + g1[0])
    t11 = min(a10 + g0[1], a11 + g1[1])
    return (a[0], b[1],
            min(t00 + b00, t01 + b10),
            min(t00 + b01, t01 + b11),
            min(t10 + b00, t11 + b10),
            min(t10 + b01, t11 + b11))


def route_lower_bound(tb: ServiceTables, last_elem, texact, rest):
    """Completion-time lower bound for (exact prefix) + (bounded rest).

    texact holds the exact per-mode completion times at the prefix end; rest
    is a sequence bound that already ends at the depot pseudo-service.  Four
    arrival-function queries plus constant work.
    """
    rf = rest[0]
    best = INF
    for x, tx in enumerate(texact):
        if tx == INF:
            continue
        ev = tb.end_v[last_elem][x]
        for y in range(tb.n_modes[rf]):
            m = rest[2 + 2 * y]
            if m == INF:
                continue
            t1 = tb.pm.arrival_extended(ev, tb.start_v[rf][y], tx)
            cand = t1 + m
            if cand < best:
                best = cand
    return best


@dataclass
class Penalties:
    capacity: float = 10.0
    duration: float = 1.0

    def scaled(self, f: float) -> "Penalties":
        return Penalties(self.capacity * f, self.duration * f)


# ------------------------------------------------------------ local search


class RouteData:
    """Per-route state: decoded times plus all subsequence bounds."""

    __slots__ = ("seq", "load", "duration", "cost", "layers", "sub", "rsub")

    def __init__(self, tb, seq, pen):
        self.seq = list(seq)
        self.load = sum(tb.q[s] for s in self.seq)
        if self.seq:
            dec = decode_route(tb, self.seq, extended=True)
            self.duration = dec.duration
            self.layers = dec.table
        else:
            self.duration = 0.0
            self.layers = [(0.0,)]
        self.cost = penalized_cost(tb, self.duration, self.load, pen)
        n = len(self.seq)
        # sub[i][k] bounds seq[i : i+k+1]; rsub the reversed counterpart
        self.sub = [[None] * (n - i) for i in range(n)]
        self.rsub = [[None] * (n - i) for i in range(n)]
        for i in range(n):
            b = single_bound(tb, self.seq[i])
            self.sub[i][0] = b
            self.rsub[i][0] = b
        for i in range(n):
            for k in range(1, n - i):
                self.sub[i][k] = seq_concat(tb, self.sub[i][k - 1],
                                            self.sub[i + k][0])
        for i in range(n - 1, -1, -1):
            for k in range(1, n - i):
                # reversed(seq[i : i+k+1]) = seq[i+k], then reversed(seq[i : i+k])
                self.rsub[i][k] = seq_concat(tb, self.rsub[i + k][0],
                                             self.rsub[i][k - 1])

    def seg(self, i, j):
        return self.sub[i][j - i - 1]

    def rseg(self, i, j):
        return self.rsub[i][j - i - 1]

    def texact(self, i):
        """Exact per-mode completion times after position i services."""
        return self.layers[i]

    def last_elem(self, tb, i):
        return self.seq[i - 1] if i > 0 else tb.depot


def penalized_cost(tb, duration, load, pen: Penalties) -> float:
    over_q = max(0.0, load - tb.inst.capacity)
    over_d = max(0.0, duration - tb.inst.duration_limit)
    return duration + pen.capacity * over_q + pen.duration * over_d


@dataclass
class SearchStats:
    moves_seen: int = 0
    moves_filtered: int = 0
    moves_decoded: int = 0
    moves_accepted: int = 0
    audit_checked: int = 0
    audit_violations: int = 0
    iterations: int = 0

    @property
    def filter_rate(self) -> float:
        return self.moves_filtered / self.moves_seen if self.moves_seen else 0.0

    def merge(self, other: "SearchStats"):
        for f in ("moves_seen", "moves_filtered", "moves_decoded",
                  "moves_accepted", "audit_checked", "audit_violations"):
            setattr(self, f, getattr(self, f) + getattr(other, f))


class LocalSearch:
    """First-improvement descent over the classical move set, screened by the
    concatenation lower bounds; candidate moves are explored in random order
    under proximity restrictions."""

    def __init__(self, tb: ServiceTables, pen: Penalties, rng: random.Random,
                 use_filters=True, audit=False, stats: SearchStats | None = None):
        self.tb = tb
        self.pen = pen
        self.rng = rng
        self.use_filters = use_filters
        self.audit = audit
        self.stats = stats if stats is not None else SearchStats()
        self.routes: list[RouteData] = []
        self.pos = {}

    # -- plumbing ------------------------------------------------------

    def load_routes(self, seqs):
        self.routes = [RouteData(self.tb, s, self.pen) for s in seqs]
        if len(self.routes) < self.tb.inst.vehicles:
            self.routes.append(RouteData(self.tb, [], self.pen))
        self._reindex()

    def _reindex(self):
        self.pos = {}
        for ri, r in enumerate(self.routes):
            for pi, s in enumerate(r.seq):
                self.pos[s] = (ri, pi)

    def total_cost(self):
        return sum(r.cost for r in self.routes)

    def sequences(self):
        return [list(r.seq) for r in self.routes if r.seq]

    # -- candidate evaluation ----------------------------------------------

    def _chunk_bound(self, chunk):
        kind = chunk[0]
        if kind == "one":
            return single_bound(self.tb, chunk[1])
        _, rd, i, j, rev = chunk
        return rd.rseg(i, j) if rev else rd.seg(i, j)

    def _chunk_seq(self, chunk):
        if chunk[0] == "one":
            return [chunk[1]]
        _, rd, i, j, rev = chunk
        part = rd.seq[i:j]
        return part[::-1] if rev else part

    def _cand_lb(self, chunks):
        """Duration lower bound of a candidate route given as chunks."""
        tb = self.tb
        chunks = [c for c in chunks
                  if not (c[0] == "seg" and c[2] == c[3])]
        if not chunks:
            return 0.0
        first = chunks[0]
        if first[0] == "seg" and first[2] == 0 and not first[4]:
            rd = first[1]
            plen = first[3]
            texact = rd.texact(plen)
            last = rd.last_elem(tb, plen)
            rest_chunks = chunks[1:]
        else:
            texact = (0.0,)
            last = tb.depot
            rest_chunks = chunks
        rest = depot_bound(tb)
        for c in reversed(rest_chunks):
            rest = seq_concat(tb, self._chunk_bound(c), rest)
        return route_lower_bound(tb, last, texact, rest)

    def _cand_load(self, chunks):
        tb = self.tb
        total = 0.0
        for c in chunks:
            if c[0] == "one":
                total += tb.q[c[1]]
            else:
                _, rd, i, j, _ = c
                total += sum(tb.q[s] for s in rd.seq[i:j])
        return total

    def _try_move(self, changes):
        """changes: dict route_idx -> chunk list.  Returns True when applied."""
        tb = self.tb
        st = self.stats
        st.moves_seen += 1
        cur_cost = sum(self.routes[ri].cost for ri in changes)
        lb_sum = 0.0
        loads = {}
        for ri, chunks in changes.items():
            lb_dur = self._cand_lb(chunks)
            load = self._cand_load(chunks)
            loads[ri] = load
            lb_sum += penalized_cost(tb, lb_dur, load, self.pen)
        filtered = self.use_filters and lb_sum >= cur_cost - EPS_IMPROVE
        if filtered and not self.audit:
            st.moves_filtered += 1
            return False
        new_cost = 0.0
        new_seqs = {}
        for ri, chunks in changes.items():
            seq = []
            for c in chunks:
                seq.extend(self._chunk_seq(c))
            new_seqs[ri] = seq
            if seq:
                dec = decode_route(tb, seq, extended=True)
                dur = dec.duration
            else:
                dur = 0.0
            new_cost += penalized_cost(tb, dur, loads[ri], self.pen)
        st.moves_decoded += 1
        if filtered:
            st.moves_filtered += 1
            st.audit_checked += 1
            if new_cost < cur_cost - EPS_IMPROVE:
                st.audit_violations += 1
            return False
        if new_cost >= cur_cost - EPS_IMPROVE:
            return False
        for ri, seq in new_seqs.items():
            self.routes[ri] = RouteData(tb, seq, self.pen)
        self._reindex()
        st.moves_accepted += 1
        return True

    # -- move enumeration ---------------------------------------------------

    def _moves_for_pair(self, u, v):
        """Candidate change-sets for the service pair (u, v)."""
        tb = self.tb
        ru, pu = self.pos[u]
        rv, pv = self.pos[v]
        A = self.routes[ru]
        B = self.routes[rv]
        la, lb = len(A.seq), len(B.seq)
        out = []

        def seg(rd, i, j, rev=False):
            return ("seg", rd, i, j, rev)

        if ru != rv:
            # relocate u after v
            out.append({ru: [seg(A, 0, pu), seg(A, pu + 1, la)],
                        rv: [seg(B, 0, pv + 1), ("one", u), seg(B, pv + 1, lb)]})
            # relocate pair (u, w) after v, plain and reversed
            if pu + 1 < la:
                w = A.seq[pu + 1]
                base = {ru: [seg(A, 0, pu), seg(A, pu + 2, la)]}
                out.append({**base, rv: [seg(B, 0, pv + 1), seg(A, pu, pu + 2),
                                         seg(B, pv + 1, lb)]})
                out.append({**base, rv: [seg(B, 0, pv + 1), seg(A, pu, pu + 2, True),
                                         seg(B, pv + 1, lb)]})
            # swap u <-> v
            out.append({ru: [seg(A, 0, pu), ("one", v), seg(A, pu + 1, la)],
                        rv: [seg(B, 0, pv), ("one", u), seg(B, pv + 1, lb)]})
            # swap pair (u, w) <-> v
            if pu + 1 < la:
                out.append({ru: [seg(A, 0, pu), ("one", v), seg(A, pu + 2, la)],
                            rv: [seg(B, 0, pv), seg(A, pu, pu + 2), seg(B, pv + 1, lb)]})
            # swap pair (u, w) <-> pair (v, z)
            if pu + 1 < la and pv + 1 < lb:
                out.append({ru: [seg(A, 0, pu), seg(B, pv, pv + 2), seg(A, pu + 2, la)],
                            rv: [seg(B, 0, pv), seg(A, pu, pu + 2), seg(B, pv + 2, lb)]})
            # 2-opt*: tail exchange
            out.append({ru: [seg(A, 0, pu + 1), seg(B, pv + 1, lb)],
                        rv: [seg(B, 0, pv + 1), seg(A, pu + 1, la)]})
            # 2-opt* with reversal: head of B reversed onto head of A
            out.append({ru: [seg(A, 0, pu + 1), seg(B, 0, pv + 1, True)],
                        rv: [seg(A, pu + 1, la, True), seg(B, pv + 1, lb)]})
        else:
            rd = A
            if pu == pv:
                return out
            # intra-route relocate u after v
            if pu < pv:
                out.append({ru: [seg(rd, 0, pu), seg(rd, pu + 1, pv + 1),
                                 ("one", u), seg(rd, pv + 1, la)]})
            else:
                out.append({ru: [seg(rd, 0, pv + 1), ("one", u),
                                 seg(rd, pv + 1, pu), seg(rd, pu + 1, la)]})
            # intra-route swap
            i, j = (pu, pv) if pu < pv else (pv, pu)
            si, sj = rd.seq[i], rd.seq[j]
            if j == i + 1:
                out.append({ru: [seg(rd, 0, i), ("one", sj), ("one", si),
                                 seg(rd, j + 1, la)]})
            else:
                out.append({ru: [seg(rd, 0, i), ("one", sj), seg(rd, i + 1, j),
                                 ("one", si), seg(rd, j + 1, la)]})
            # 2-opt: reverse the segment between u and v (inclusive of later)
            if j > i + 1:
                out.append({ru: [seg(rd, 0, i + 1), seg(rd, i + 1, j + 1, True),
                                 seg(rd, j + 1, la)]})
        return out

    def _relocate_to_empty(self, u):
        tb = self.tb
        ru, pu = self.pos[u]
        A = self.routes[ru]
        la = len(A.seq)
        if la <= 1:
            return []
        for ri, r in enumerate(self.routes):
            if not r.seq:
                return [{ru: [("seg", A, 0, pu, False), ("seg", A, pu + 1, la, False)],
                         ri: [("one", u)]}]
        return []

    # -- main loop ---------------------------------------------------------

    def run(self, seqs):
        self.load_routes(seqs)
        n = self.tb.n
        order = list(range(n))
        improved = True
        while improved:
            improved = False
            self.rng.shuffle(order)
            for u in order:
                if u not in self.pos:
                    continue
                applied = False
                for v in self.tb.prox[u]:
                    if v not in self.pos or v == u:
                        continue
                    for change in self._moves_for_pair(u, v):
                        if self._try_move(change):
                            applied = True
                            improved = True
                            break
                    if applied:
                        break
                if not applied:
                    for change in self._relocate_to_empty(u):
                        if self._try_move(change):
                            improved = True
                            break
        return self.sequences()


def local_search(tb: ServiceTables, seqs, pen: Penalties, rng: random.Random,
                 use_filters=True, audit=False, stats=None):
    """Descend from the given routes; returns locally optimal sequences."""
    ls = LocalSearch(tb, pen, rng, use_filters, audit, stats)
    return ls.run(seqs)


# ------------------------------------------------------------------- split


def split_giant_tour(tb: ServiceTables, perm, pen: Penalties, max_routes=None):
    """Optimal partition of a service permutation into at most m consecutive
    routes, minimizing the penalized decoded cost (shortest path on the
    split DAG, route extensions decoded incrementally)."""
    m = max_routes if max_routes is not None else tb.inst.vehicles
    n = len(perm)
    if n == 0:
        return []
    cap_window = 1.5 * tb.inst.capacity

    def arc_costs(window=True):
        arcs = [[] for _ in range(n)]
        for i in range(n):
            layer = (0.0,)
            prev = tb.depot
            load = 0.0
            for j in range(i, n):
                s = perm[j]
                load += tb.q[s]
                if window and j > i and load > cap_window:
                    break
                cur = []
                for l in range(tb.n_modes[s]):
                    best = INF
                    for k, tk in enumerate(layer):
                        if tk == INF:
                            continue
                        t1 = tb.travel_extended(prev, k, s, l, tk)
                        t2 = tb.complete_extended(s, l, t1)
                        if t2 < best:
                            best = t2
                    cur.append(best)
                layer = tuple(cur)
                prev = s
                dur = INF
                for k, tk in enumerate(layer):
                    if tk == INF:
                        continue
                    t1 = tb.travel_extended(prev, k, tb.depot, 0, tk)
                    if t1 < dur:
                        dur = t1
                if dur == INF:
                    # endpoint unreachable within the horizon: huge but
                    # finite cost keeps the partition DAG total
                    cost = 1e9 * (j + 1 - i) + load
                else:
                    cost = penalized_cost(tb, dur, load, pen)
                arcs[i].append((j + 1, cost))
                if dur == INF:
                    break
        return arcs

    for window in (True, False):
        arcs = arc_costs(window)
        kmax = min(m, n)
        dp = [[INF] * (n + 1) for _ in range(kmax + 1)]
        pred = [[-1] * (n + 1) for _ in range(kmax + 1)]
        dp[0][0] = 0.0
        for k in range(1, kmax + 1):
            for i in range(n):
                base = dp[k - 1][i]
                if base == INF:
                    continue
                for (j, c) in arcs[i]:
                    if base + c < dp[k][j] - 1e-15:
                        dp[k][j] = base + c
                        pred[k][j] = i
        bestk = min(range(1, kmax + 1), key=lambda k: dp[k][n], default=None)
        if bestk is not None and dp[bestk][n] < INF:
            routes = []
            j = n
            k = bestk
            while j > 0:
                i = pred[k][j]
                routes.append(list(perm[i:j]))
                j = i
                k -= 1
            routes.reverse()
            return routes
    raise RuntimeError("split failed even without the load window")


# -------------------------------------------------------------- crossover


def crossover_ox(parent1, parent2, rng: random.Random, cut=None):
    """Ordered crossover on giant permutations.

    The child keeps a contiguous section of parent1 and fills the remaining
    positions with the missing services in parent2's order.
    """
    p1 = _as_perm(parent1)
    p2 = _as_perm(parent2)
    n = len(p1)
    if n == 1:
        return list(p1)
    if cut is None:
        i = rng.randrange(n)
        j = rng.randrange(n)
    else:
        i, j = cut
    if i > j:
        i, j = j, i
    child = [None] * n
    child[i:j + 1] = p1[i:j + 1]
    used = set(child[i:j + 1])
    fill = [p2[(j + 1 + k) % n] for k in range(n)]
    fill = [s for s in fill if s not in used]
    k = 0
    for idx in list(range(j + 1, n)) + list(range(0, i)):
        child[idx] = fill[k]
        k += 1
    return child


def _as_perm(p):
    if isinstance(p, RoutePlan):
        out = []
        for r in p.routes:
            out.extend(r)
        return out
    if p and isinstance(p[0], list):
        out = []
        for r in p:
            out.extend(r)
        return out
    return list(p)


# ------------------------------------------------------------------ plans


@dataclass
class RoutePlan:
    """Decoded solution: mode-free routes plus decoded annotations.

    routes hold link ids; modes are the decoder's optimal orientations
    (1-based, aligned with the routes)."""

    routes: list
    durations: list
    loads: list
    modes: list
    total_duration: float
    capacity_feasible: bool
    duration_feasible: bool

    @property
    def feasible(self) -> bool:
        return self.capacity_feasible and self.duration_feasible

    def route_count(self) -> int:
        return len(self.routes)


def plan_from_sequences(tb: ServiceTables, seqs) -> RoutePlan:
    routes = []
    durations = []
    loads = []
    modes = []
    total = 0.0
    cap_ok = True
    dur_ok = True
    for seq in seqs:
        if not seq:
            continue
        dec = decode_route(tb, seq, extended=True)
        load = sum(tb.q[s] for s in seq)
        routes.append([tb.link_id(s) for s in seq])
        durations.append(dec.duration)
        loads.append(load)
        modes.append([m + 1 for m in dec.modes])
        total += dec.duration
        cap_ok = cap_ok and load <= tb.inst.capacity + 1e-9
        dur_ok = dur_ok and dec.duration <= tb.inst.duration_limit + 1e-9
    return RoutePlan(routes, durations, loads, modes, total, cap_ok, dur_ok)


def format_solution(plan: RoutePlan, stats: dict | None = None) -> str:
    """Solution file: one line per route, then the objective and statistics."""
    out = []
    for k, (route, dur, load, modes) in enumerate(
            zip(plan.routes, plan.durations, plan.loads, plan.modes), start=1):
        body = " ".join(f"{lid}:{m}" for lid, m in zip(route, modes))
        out.append(f"ROUTE {k} DUR {dur:.6f} LOAD {load:g} : {body}")
    out.append(f"OBJECTIVE {plan.total_duration:.6f}")
    out.append(f"FEASIBLE {int(plan.feasible)}")
    for key in sorted(stats or {}):
        out.append(f"STAT {key} {stats[key]}")
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ search


@dataclass
class HgsParams:
    mu_min: int = 25
    lambda_gen: int = 40
    elite_frac: float = 0.4
    n_close: int = 5
    prox_count: int = 15
    target_feasible: float = 0.25
    penalty_inc: float = 1.2
    penalty_dec: float = 1.15
    repair_prob: float = 0.5
    restart_after: int = 10_000
    max_iters: int = 100_000
    max_no_improve: int = 20_000
    use_filters: bool = True
    audit: bool = False


class Individual:
    __slots__ = ("seqs", "cost", "total_duration", "cap_excess", "dur_excess",
                 "feasible", "key", "succ", "serial")

    _serial_counter = 0

    def __init__(self, tb, seqs, pen):
        Individual._serial_counter += 1
        self.serial = Individual._serial_counter
        self.seqs = [list(s) for s in seqs if s]
        total = 0.0
        cost = 0.0
        cap_ex = 0.0
        dur_ex = 0.0
        for seq in self.seqs:
            dec = decode_route(tb, seq, extended=True)
            load = sum(tb.q[s] for s in seq)
            total += dec.duration
            cost += penalized_cost(tb, dec.duration, load, pen)
            cap_ex += max(0.0, load - tb.inst.capacity)
            dur_ex += max(0.0, dec.duration - tb.inst.duration_limit)
        self.total_duration = total
        self.cost = cost
        self.cap_excess = cap_ex
        self.dur_excess = dur_ex
        self.feasible = cap_ex <= 1e-9 and dur_ex <= 1e-9
        self.key = tuple(tuple(s) for s in sorted(self.seqs))
        succ = [tb.depot] * tb.n
        for seq in self.seqs:
            for a, b in zip(seq, seq[1:]):
                succ[a] = b
            if seq:
                succ[seq[-1]] = tb.depot
        self.succ = tuple(succ)


def broken_pairs_distance(a: Individual, b: Individual, n: int) -> float:
    diff = sum(1 for x, y in zip(a.succ, b.succ) if x != y)
    return diff / n if n else 0.0


@dataclass
class HgsStats:
    iterations: int = 0
    restarts: int = 0
    best_objective: float = INF
    best_iteration: int = 0
    wall_seconds: float = 0.0
    search: SearchStats = field(default_factory=SearchStats)
    bucket_direct_rate: float = 0.0
    feasible_ratio: float = 0.0


class _Population:
    def __init__(self, tb, params, rng):
        self.tb = tb
        self.params = params
        self.rng = rng
        self.feas: list[Individual] = []
        self.infeas: list[Individual] = []
        self._dist_cache = {}

    def _sub(self, ind):
        return self.feas if ind.feasible else self.infeas

    def contains_clone(self, ind):
        return any(o.key == ind.key for o in self._sub(ind))

    def insert(self, ind):
        if self.contains_clone(ind):
            return False
        sub = self._sub(ind)
        sub.append(ind)
        cap = self.params.mu_min + self.params.lambda_gen
        if len(sub) > cap:
            self._select_survivors(sub)
        return True

    def _distance(self, a, b):
        key = ((a.serial, b.serial) if a.serial < b.serial
               else (b.serial, a.serial))
        d = self._dist_cache.get(key)
        if d is None:
            d = broken_pairs_distance(a, b, self.tb.n)
            self._dist_cache[key] = d
        return d

    def _biased_fitness(self, sub):
        size = len(sub)
        by_cost = sorted(range(size), key=lambda i: (sub[i].cost, i))
        cost_rank = [0] * size
        for r, i in enumerate(by_cost):
            cost_rank[i] = r
        ncl = min(self.params.n_close, max(1, size - 1))
        div = []
        for i in range(size):
            ds = sorted(self._distance(sub[i], sub[j])
                        for j in range(size) if j != i)
            div.append(sum(ds[:ncl]) / ncl if ds else 0.0)
        by_div = sorted(range(size), key=lambda i: (-div[i], i))
        div_rank = [0] * size
        for r, i in enumerate(by_div):
            div_rank[i] = r
        elite = self.params.elite_frac * self.params.mu_min
        w = 1.0 - elite / max(size, 1)
        return [cost_rank[i] + w * div_rank[i] for i in range(size)]

    def _select_survivors(self, sub):
        while len(sub) > self.params.mu_min:
            bf = self._biased_fitness(sub)
            # clones (zero distance to someone) leave first, worst fitness next
            clone_idx = [i for i in range(len(sub))
                         if any(self._distance(sub[i], sub[j]) == 0.0
                                for j in range(len(sub)) if j != i)]
            pool = clone_idx if clone_idx else range(len(sub))
            worst = max(pool, key=lambda i: bf[i])
            sub.pop(worst)

    def tournament(self):
        union = self.feas + self.infeas
        bf_f = self._biased_fitness(self.feas) if self.feas else []
        bf_i = self._biased_fitness(self.infeas) if self.infeas else []
        bf = bf_f + bf_i
        a = self.rng.randrange(len(union))
        b = self.rng.randrange(len(union))
        return union[a] if bf[a] <= bf[b] else union[b]

    def best_feasible(self):
        return min(self.feas, key=lambda i: (i.total_duration,), default=None)

    def size(self):
        return len(self.feas) + len(self.infeas)


def run_hgs(inst, pm, params: HgsParams | None = None, seed: int = 0,
            time_limit: float | None = None, tables: ServiceTables | None = None,
            initial_penalties: Penalties | None = None):
    """Hybrid genetic search; deterministic given the seed.

    Returns (best RoutePlan, HgsStats).  The best feasible individual wins;
    if nothing feasible was ever found, the least penalized one is decoded.
    """
    params = params or HgsParams()
    tb = tables or ServiceTables(inst, pm, prox_count=params.prox_count)
    rng = random.Random(seed)
    t0 = time.perf_counter()
    deadline = t0 + time_limit if time_limit is not None else None

    if initial_penalties is None:
        mean_svc = sum(tb.svc_gap[s][0] for s in range(tb.n)) / max(1, tb.n)
        mean_q = sum(tb.q[s] for s in range(tb.n)) / max(1, tb.n)
        pen = Penalties(capacity=max(0.1, mean_svc / max(mean_q, 1e-9)), duration=1.0)
    else:
        pen = initial_penalties

    stats = HgsStats()
    search_stats = stats.search
    best_plan = None
    best_obj = INF
    best_any = None  # fallback when nothing feasible shows up

    def out_of_time():
        return deadline is not None and time.perf_counter() > deadline

    def make_individual(perm):
        seqs = split_giant_tour(tb, perm, pen)
        seqs = local_search(tb, seqs, pen, rng, params.use_filters,
                            params.audit, search_stats)
        return Individual(tb, seqs, pen)

    def register(ind):
        nonlocal best_plan, best_obj, best_any
        if best_any is None or ind.cost < best_any.cost:
            best_any = ind
        if ind.feasible and ind.total_duration < best_obj - EPS_IMPROVE:
            best_obj = ind.total_duration
            best_plan = plan_from_sequences(tb, ind.seqs)
            stats.best_objective = best_obj
            stats.best_iteration = stats.iterations
            return True
        return False

    pop = _Population(tb, params, rng)
    recent_cap = []
    recent_dur = []
    feasible_offspring = 0

    def init_population():
        count = 0
        while pop.size() < params.mu_min and count < 4 * params.mu_min:
            count += 1
            perm = list(range(tb.n))
            rng.shuffle(perm)
            ind = make_individual(perm)
            register(ind)
            pop.insert(ind)
            if out_of_time():
                break

    init_population()
    no_improve = 0
    since_restart = 0
    while (stats.iterations < params.max_iters
           and no_improve < params.max_no_improve and not out_of_time()):
        stats.iterations += 1
        since_restart += 1
        if pop.size() < 2:
            init_population()
            if pop.size() == 0:
                break
        p1 = pop.tournament()
        p2 = pop.tournament()
        child_perm = crossover_ox(p1.seqs, p2.seqs, rng)
        ind = make_individual(child_perm)
        improved = register(ind)
        pop.insert(ind)
        if not ind.feasible and rng.random() < params.repair_prob:
            repaired_seqs = local_search(tb, ind.seqs, pen.scaled(10.0), rng,
                                         params.use_filters, params.audit,
                                         search_stats)
            rep = Individual(tb, repaired_seqs, pen)
            if rep.feasible:
                improved = register(rep) or improved
                pop.insert(rep)
        recent_cap.append(ind.cap_excess <= 1e-9)
        recent_dur.append(ind.dur_excess <= 1e-9)
        if ind.feasible:
            feasible_offspring += 1
        if len(recent_cap) >= 100:
            frac_cap = sum(recent_cap) / len(recent_cap)
            frac_dur = sum(recent_dur) / len(recent_dur)
            pen = Penalties(
                capacity=_adapt(pen.capacity, frac_cap, params),
                duration=_adapt(pen.duration, frac_dur, params),
            )
            recent_cap.clear()
            recent_dur.clear()
        if improved:
            no_improve = 0
            since_restart = 0
        else:
            no_improve += 1
        if since_restart >= params.restart_after:
            pop = _Population(tb, params, rng)
            init_population()
            since_restart = 0
            stats.restarts += 1

    if best_plan is None:
        source = best_any if best_any is not None else pop.best_feasible()
        if source is None:
            raise InfeasibleRoute("search produced no individual at all")
        best_plan = plan_from_sequences(tb, source.seqs)
        stats.best_objective = best_plan.total_duration
    stats.wall_seconds = time.perf_counter() - t0
    if pm.stats is not None and pm.stats.total:
        stats.bucket_direct_rate = pm.stats.direct_rate
    stats.feasible_ratio = (feasible_offspring / stats.iterations
                            if stats.iterations else 1.0)
    return best_plan, stats


def _adapt(value, feasible_frac, params):
    if feasible_frac < params.target_feasible:
        value *= params.penalty_inc
    else:
        value /= params.penalty_dec
    return min(max(value, 0.01), 1e5)
