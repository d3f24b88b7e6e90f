"""Branch-cut-and-price for the set-partitioning formulation.

Column generation prices time-feasible routes with a forward labeling whose
states carry (last oriented service, load, arrival time, collected duals,
neighbor memory).  Arrival time and collected duals are compared separately
in the dominance rule; a mu-weighted heuristic dominance and a one-label-per
(link, load) fast pricer accelerate the search, and a backward max-speed
table provides completion bounds to fathom forward labels.  Branching covers
vertex deadhead degrees, deadhead arcs and required-graph arcs, scored by
strong branching over fast-pricing child solves; the tree is explored
best-bound first.

Tree nodes are processed sequentially; strong-branching candidate solves
share no mutable state and may be evaluated concurrently.
"""

from __future__ import annotations

import heapq
import json
import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _dijkstra

from .hgs import RoutePlan, decode_route, fixed_route_duration, plan_from_sequences
from .lp import LinearProgram, LpBackendFailure
from .network import Instance
from .pltime import bucket_query
from .profiles import ProfileMatrix
from .tables import ServiceTables

INF = math.inf

PRICE_TOL = 1e-6       # a column must beat this reduced cost to be returned
INT_TOL = 1e-6
PRUNE_TOL = 1e-6
FATHOM_TOL = 1e-10
MAX_COLUMNS_PER_CALL = 200
BIG_COST_FACTOR = 1e4


class TimeLimitReached(Exception):
    pass


def route_duration(tb: ServiceTables, oriented) -> float:
    """Duration of an oriented service sequence via the chained travel and
    service queries (identical to the decoder's fixed-mode evaluation)."""
    return fixed_route_duration(tb, oriented)


# ------------------------------------------------------------------ columns


class Column:
    """One priced route: oriented services plus its master-row incidences."""

    __slots__ = ("services", "cost", "a", "bhat", "btilde", "key")

    def __init__(self, services, cost, depot_elem):
        self.services = tuple(services)       # ((svc, mode), ...) 0-based modes
        self.cost = float(cost)
        self.key = self.services
        counts = {}
        for (s, _) in self.services:
            counts[s] = counts.get(s, 0) + 1
        self.a = counts
        self.bhat = ()
        self.btilde = ()
        if self.services:
            elems = [depot_elem] + [s for (s, _) in self.services] + [depot_elem]
            self.btilde = tuple(zip(elems, elems[1:]))

    def attach_endpoints(self, tb):
        """Deadhead incidences need the instance geometry; zero-length hops
        (shared vertex) produce no deadhead pair."""
        if not self.services:
            return self
        pts = [0]
        for (s, m) in self.services:
            pts.append(tb.start_v[s][m])
            pts.append(tb.end_v[s][m])
        pts.append(0)
        pairs = []
        for k in range(0, len(pts) - 1, 2):
            i, j = pts[k], pts[k + 1]
            if i != j:
                pairs.append((i, j))
        self.bhat = tuple(pairs)
        return self

    def __repr__(self):
        body = ",".join(f"{s}:{m}" for (s, m) in self.services)
        return f"Column([{body}], cost={self.cost:.4f})"


def make_column(tb: ServiceTables, oriented) -> Column:
    cost = route_duration(tb, oriented)
    return Column(oriented, cost, tb.depot).attach_endpoints(tb)


EMPTY_KEY = ()


def empty_column(tb: ServiceTables) -> Column:
    return Column((), 0.0, tb.depot)


# -------------------------------------------------------------- dual state


class DualState:
    """Duals mapped onto the structures pricing consumes: fleet scalar, one
    beta per service, a vertex-pair matrix (cut/branch mass on deadhead
    pairs) and an element-pair matrix (mass on required-graph arcs)."""

    def __init__(self, gamma, beta, rho, pi):
        self.gamma = gamma
        self.beta = beta          # list, per service
        self.rho = rho            # |V| x |V| ndarray
        self.pi = pi              # (n+1) x (n+1) ndarray

    @staticmethod
    def blend(prev: "DualState", cur: "DualState", alpha: float) -> "DualState":
        if prev is None or alpha <= 0.0:
            return cur
        b = 1.0 - alpha
        return DualState(
            alpha * prev.gamma + b * cur.gamma,
            [alpha * p + b * c for p, c in zip(prev.beta, cur.beta)],
            alpha * prev.rho + b * cur.rho,
            alpha * prev.pi + b * cur.pi,
        )


def reduced_cost(col: Column, duals: DualState) -> float:
    """Independent recomputation from the column's incidences."""
    val = col.cost - duals.gamma
    for s, cnt in col.a.items():
        val -= cnt * duals.beta[s]
    for (i, j) in col.bhat:
        val -= duals.rho[i][j]
    for (e1, e2) in col.btilde:
        val -= duals.pi[e1][e2]
    return val


# ----------------------------------------------------------- cuts / branches


@dataclass(frozen=True)
class Cut:
    """Valid inequality over the master columns.

    kind 'odd_edge': vertex set S, crossing deadhead mass >= 1.
    kind 'capacity': service set S, crossing required-graph mass >= 2k(S).
    """

    kind: str
    members: frozenset
    rhs: float

    def coef(self, col: Column) -> float:
        if self.kind == "odd_edge":
            return float(sum(1 for (i, j) in col.bhat
                             if (i in self.members) != (j in self.members)))
        return float(sum(1 for (e1, e2) in col.btilde
                         if (e1 in self.members) != (e2 in self.members)))


@dataclass(frozen=True)
class BranchConstraint:
    """Branching decision: bound an aggregated quantity of the solution.

    kind 'vertex_deg' (key: vertex), 'dh_arc' (key: vertex pair) or
    'req_arc' (key: element pair).  sense '<='/'>='.  A '<= 0' constraint is
    enforced as a pricing filter plus column fixing instead of an LP row.
    """

    kind: str
    key: tuple
    sense: str
    rhs: float

    @property
    def is_filter(self) -> bool:
        return self.sense == "<=" and self.rhs == 0.0

    def coef(self, col: Column) -> float:
        if self.kind == "vertex_deg":
            v = self.key
            return float(sum(1 for (i, j) in col.bhat if i == v or j == v))
        if self.kind == "dh_arc":
            return float(sum(1 for p in col.bhat if p == self.key))
        return float(sum(1 for p in col.btilde if p == self.key))

    def violates_filter(self, col: Column) -> bool:
        return self.is_filter and self.coef(col) > 0


# ------------------------------------------------------------------- nodes


@dataclass
class Node:
    id: int
    depth: int
    bound: float
    constraints: tuple

    def __lt__(self, other):
        return (self.bound, self.id) < (other.bound, other.id)


@dataclass
class FracSolution:
    objective: float
    lam: list
    coverage: dict          # service -> mass
    btilde: dict            # (e1, e2) -> mass
    bhat: dict              # (i, j) -> mass
    vdeg: dict              # vertex -> mass
    artificial: float


# ------------------------------------------------------------------ context


class BcpContext:
    def __init__(self, inst: Instance, pm: ProfileMatrix,
                 tables: ServiceTables | None = None):
        self.inst = inst
        self.pm = pm
        self.tb = tables or ServiceTables(inst, pm)
        tb = self.tb
        self.columns: list[Column] = []
        self.col_index = {}
        self.cuts: list[Cut] = []
        self.cut_keys = set()
        self.cut_coefs: list[dict] = []       # per cut: {col_idx: coef}
        self.static_coefs: list[dict] = []    # per column: {master_row: coef}
        self.branch_coef_cache = {}
        self.capacity = inst.capacity
        self.horizon = inst.duration_limit
        # static minimum times (max speed per link) for the backward bounds
        self.tmin_travel = _max_speed_travel_matrix(inst)
        self.tmin_svc = [[INF, INF] for _ in range(tb.n)]
        for s in range(tb.n):
            lid = tb.link_id(s)
            link = inst.link(lid)
            for m in range(tb.n_modes[s]):
                vmax = inst.service_speed(lid, m).max_speed()
                self.tmin_svc[s][m] = link.dist / vmax
        self.stats = {"exact_price_calls": 0, "heuristic_price_calls": 0,
                      "fast_price_calls": 0, "cg_iterations": 0,
                      "nodes_exact": 0, "nodes_heuristic": 0,
                      "single_exact_nodes": 0}

    def add_column(self, col: Column) -> bool:
        # static master rows use a fixed layout: row 0 fleet, rows 1..n the
        # services, rows n+1.. the cuts; branch rows are appended per node
        if col.key in self.col_index:
            return False
        j = len(self.columns)
        self.col_index[col.key] = j
        self.columns.append(col)
        coefs = {0: 1.0}
        for s, cnt in col.a.items():
            coefs[1 + s] = float(cnt)
        base = 1 + self.tb.n
        for ci, cut in enumerate(self.cuts):
            c = cut.coef(col)
            if c:
                self.cut_coefs[ci][j] = c
                coefs[base + ci] = c
        self.static_coefs.append(coefs)
        return True

    def add_cut(self, cut: Cut) -> bool:
        key = (cut.kind, cut.members)
        if key in self.cut_keys:
            return False
        self.cut_keys.add(key)
        ci = len(self.cuts)
        self.cuts.append(cut)
        coefs = {}
        row = 1 + self.tb.n + ci
        for j, col in enumerate(self.columns):
            c = cut.coef(col)
            if c:
                coefs[j] = c
                self.static_coefs[j][row] = c
        self.cut_coefs.append(coefs)
        return True

    def branch_coef(self, con: BranchConstraint, j: int) -> float:
        key = (con, j)
        c = self.branch_coef_cache.get(key)
        if c is None:
            c = con.coef(self.columns[j])
            self.branch_coef_cache[key] = c
        return c


def _max_speed_travel_matrix(inst: Instance):
    rows, cols, data = [], [], []
    for l in inst.links:
        for (d, s, e) in inst.directions(l):
            rows.append(s)
            cols.append(e)
            data.append(l.dist / inst.travel_speed(l.id, d).max_speed())
    g = csr_matrix((data, (rows, cols)),
                   shape=(inst.num_vertices, inst.num_vertices))
    return _dijkstra(g, directed=True)


# ------------------------------------------------------------------ pricing


class Label:
    __slots__ = ("elem", "mode", "load", "phi", "xi", "mem", "pred", "alive")

    def __init__(self, elem, mode, load, phi, xi, mem, pred):
        self.elem = elem
        self.mode = mode
        self.load = load
        self.phi = phi
        self.xi = xi
        self.mem = mem
        self.pred = pred
        self.alive = True


def _exact_dominates(a: Label, b: Label) -> bool:
    return (a.phi <= b.phi + 1e-12 and a.xi >= b.xi - 1e-12
            and (a.mem & ~b.mem) == 0)


def _heuristic_dominates(a: Label, b: Label, mu: float) -> bool:
    return (a.phi <= b.phi + 1e-12
            and a.xi + mu * (b.phi - a.phi) >= b.xi - 1e-12
            and (a.mem & ~b.mem) == 0)


class Pricer:
    """Forward labeling shared by the exact, heuristic and fast pricers.

    Extension entries are flattened per (element, mode): endpoint functions,
    domain ends and the dual contribution of the transition are resolved once
    so the inner loop touches only floats."""

    def __init__(self, ctx: BcpContext, duals: DualState, constraints=(),
                 ng: bool = True):
        self.ctx = ctx
        self.tb = ctx.tb
        self.duals = duals
        tb = self.tb
        full = (1 << tb.n) - 1
        self.ng_mask = tb.ng_mask if ng else [full] * tb.n
        self.banned_vertices = set()
        self.banned_vpairs = set()
        self.banned_epairs = set()
        for c in constraints:
            if not c.is_filter:
                continue
            if c.kind == "vertex_deg":
                self.banned_vertices.add(c.key)
            elif c.kind == "dh_arc":
                self.banned_vpairs.add(c.key)
            else:
                self.banned_epairs.add(c.key)
        pm = tb.pm
        rho = duals.rho
        pi = duals.pi
        beta = duals.beta
        self.ext = {}
        self.close_info = {}
        for e in range(tb.n + 1):
            for m in range(tb.n_modes[e]):
                ev = tb.end_v[e][m]
                entries = []
                for s in range(tb.n):
                    lid = tb.services[s]
                    for l in range(tb.n_modes[s]):
                        sv = tb.start_v[s][l]
                        if self._transition_banned(ev, sv, e, s):
                            continue
                        pfn = pm.psi[(ev, sv)]
                        if pfn.is_infeasible:
                            continue
                        pidx = pm.indexes[(ev, sv)]
                        sfn = pm.funcs.service[(lid, l)]
                        sidx = pm.funcs.service_idx[(lid, l)]
                        dual_c = beta[s] + rho[ev][sv] + pi[e][s]
                        entries.append((s, l, 1 << s, tb.q[s], dual_c,
                                        self.ng_mask[s], pfn, pidx,
                                        pfn._xl[0], pfn._xl[-1],
                                        sfn, sidx, sfn._xl[-1]))
                self.ext[(e, m)] = entries
                if e != tb.depot:
                    if self._transition_banned(ev, 0, e, tb.depot):
                        self.close_info[(e, m)] = None
                    else:
                        cfn = pm.psi[(ev, 0)]
                        if cfn.is_infeasible:
                            self.close_info[(e, m)] = None
                        else:
                            self.close_info[(e, m)] = (
                                cfn, pm.indexes[(ev, 0)], cfn._xl[0], cfn._xl[-1],
                                rho[ev][0] + pi[e][tb.depot])

    def _transition_banned(self, ev, sv, e1, e2) -> bool:
        if ev != sv:
            if (ev, sv) in self.banned_vpairs:
                return True
            if ev in self.banned_vertices or sv in self.banned_vertices:
                return True
        return (e1, e2) in self.banned_epairs

    def start_label(self) -> Label:
        return Label(self.tb.depot, 0, 0.0, 0.0, self.duals.gamma, 0, None)

    def extend(self, lab: Label, s: int, l: int) -> Label | None:
        for entry in self.ext[(lab.elem, lab.mode)]:
            if entry[0] == s and entry[1] == l:
                break
        else:
            return None
        (_, _, bit, qs, dual_c, ngm, pfn, pidx, p0, p1, sfn, sidx, s1) = entry
        if lab.mem & bit:
            return None
        q2 = lab.load + qs
        if q2 > self.ctx.capacity + 1e-9:
            return None
        if lab.phi < p0 or lab.phi > p1:
            return None
        t1 = bucket_query(pfn, pidx, lab.phi)
        if t1 > s1:
            return None
        t2 = bucket_query(sfn, sidx, t1)
        return Label(s, l, q2, t2, lab.xi + dual_c, (lab.mem & ngm) | bit, lab)

    def close(self, lab: Label) -> float:
        """Reduced cost of completing the label's route back at the depot."""
        if lab.pred is None:
            return INF  # the empty route is a permanent column
        info = self.close_info.get((lab.elem, lab.mode))
        if info is None:
            return INF
        cfn, cidx, c0, c1, dual_c = info
        if lab.phi < c0 or lab.phi > c1:
            return INF
        t = bucket_query(cfn, cidx, lab.phi)
        return t - (lab.xi + dual_c)

    def route_of(self, lab: Label):
        out = []
        while lab.pred is not None:
            out.append((lab.elem, lab.mode))
            lab = lab.pred
        out.reverse()
        return out


def _collect_columns(ctx, pricer, labels, duals):
    """Close labels, keep provably negative columns, verify by recomputation."""
    tb = ctx.tb
    scored = []
    for lab in labels:
        rc = pricer.close(lab)
        if rc < -PRICE_TOL:
            scored.append((rc, lab))
    scored.sort(key=lambda t: t[0])
    out = []
    seen = set()
    for rc, lab in scored[: 4 * MAX_COLUMNS_PER_CALL]:
        oriented = pricer.route_of(lab)
        key = tuple(oriented)
        if key in seen:
            continue
        seen.add(key)
        col = make_column(tb, oriented)
        check = reduced_cost(col, duals)
        if check >= -PRICE_TOL:
            continue
        if abs(check - rc) > 1e-6 * max(1.0, abs(rc)):
            raise AssertionError(
                f"pricing reduced cost {rc} disagrees with recomputation {check}")
        out.append(col)
        if len(out) >= MAX_COLUMNS_PER_CALL:
            break
    return out


def _label_pricing(ctx, duals, constraints, dominates, bounds=None):
    """Label-correcting forward search with the given dominance predicate."""
    pr = Pricer(ctx, duals, constraints, ng=True)
    cap = ctx.capacity + 1e-9
    buckets = {}
    queue = deque()
    start = pr.start_label()
    all_labels = [start]
    queue.append(start)
    pops = 0
    while queue:
        lab = queue.popleft()
        if not lab.alive:
            continue
        pops += 1
        if pops > 500_000:
            raise RuntimeError("pricing label explosion")
        mem = lab.mem
        load = lab.load
        phi = lab.phi
        xi = lab.xi
        for (s, l, bit, qs, dual_c, ngm, pfn, pidx, p0, p1,
             sfn, sidx, s1) in pr.ext[(lab.elem, lab.mode)]:
            if mem & bit:
                continue
            q2 = load + qs
            if q2 > cap:
                continue
            if phi < p0 or phi > p1:
                continue
            t1 = bucket_query(pfn, pidx, phi)
            if t1 > s1:
                continue
            t2 = bucket_query(sfn, sidx, t1)
            xi2 = xi + dual_c
            if bounds is not None:
                if (t2 - xi2) + bounds.lookup(s, l, q2, t2) >= -FATHOM_TOL:
                    continue
            mem2 = (mem & ngm) | bit
            key = (s, l, int(q2))
            lst = buckets.get(key)
            if lst is None:
                lst = []
                buckets[key] = lst
            new = Label(s, l, q2, t2, xi2, mem2, lab)
            dominated = False
            for o in lst:
                if dominates(o, new):
                    dominated = True
                    break
            if dominated:
                continue
            keep = []
            for o in lst:
                if dominates(new, o):
                    o.alive = False
                else:
                    keep.append(o)
            keep.append(new)
            buckets[key] = keep
            all_labels.append(new)
            queue.append(new)
    return [lab for lab in all_labels if lab.alive and lab.pred is not None], pr


def price_exact(ctx: BcpContext, duals: DualState, constraints=(), bounds=None):
    """Complete pricing under the exact dominance (separate time and dual
    comparisons); an empty return proves no negative reduced-cost route
    exists for these duals."""
    ctx.stats["exact_price_calls"] += 1
    labels, pr = _label_pricing(ctx, duals, constraints, _exact_dominates, bounds)
    return _collect_columns(ctx, pr, labels, duals)


def price_heuristic_dominance(ctx: BcpContext, duals: DualState, mu: float = 0.5,
                              constraints=()):
    """Same machinery with the mu-weighted dominance; may miss columns, every
    returned column is still verified negative."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    ctx.stats["heuristic_price_calls"] += 1

    def dom(a, b):
        return _heuristic_dominates(a, b, mu)

    labels, pr = _label_pricing(ctx, duals, constraints, dom)
    return _collect_columns(ctx, pr, labels, duals)


def price_fast(ctx: BcpContext, duals: DualState, constraints=()):
    """One best label per (oriented service, load); no dominance lists."""
    ctx.stats["fast_price_calls"] += 1
    pr = Pricer(ctx, duals, constraints, ng=False)  # full memory: elementary
    cap = ctx.capacity + 1e-9
    best = {}
    queue = deque()
    start = pr.start_label()
    queue.append(start)
    finals = []
    pops = 0
    while queue:
        lab = queue.popleft()
        if not lab.alive:
            continue
        pops += 1
        if pops > 500_000:
            raise RuntimeError("fast pricing explosion")
        mem = lab.mem
        load = lab.load
        phi = lab.phi
        xi = lab.xi
        for (s, l, bit, qs, dual_c, ngm, pfn, pidx, p0, p1,
             sfn, sidx, s1) in pr.ext[(lab.elem, lab.mode)]:
            if mem & bit:
                continue
            q2 = load + qs
            if q2 > cap:
                continue
            if phi < p0 or phi > p1:
                continue
            t1 = bucket_query(pfn, pidx, phi)
            if t1 > s1:
                continue
            t2 = bucket_query(sfn, sidx, t1)
            xi2 = xi + dual_c
            key = (s, l, int(q2))
            cur = best.get(key)
            if cur is not None and cur.phi - cur.xi <= t2 - xi2 + 1e-12:
                continue
            if cur is not None:
                cur.alive = False
            new = Label(s, l, q2, t2, xi2, (mem & ngm) | bit, lab)
            best[key] = new
            finals.append(new)
            queue.append(new)
    labels = [lab for lab in finals if lab.alive]
    return _collect_columns(ctx, pr, labels, duals)


# ------------------------------------------------------- completion bounds


class CompletionBounds:
    """Backward max-speed table: a lower bound on the reduced cost of any
    feasible completion of a forward label, indexed by (oriented service,
    load budget, integer time-budget bucket)."""

    def __init__(self, table, width, kmax, tmin_svc, capacity, horizon, qs):
        self.table = table        # (svc, mode) -> ndarray (Q+1, K+1)
        self.width = width
        self.kmax = kmax
        self.tmin_svc = tmin_svc
        self.capacity = capacity
        self.horizon = horizon
        self.qs = qs

    def lookup(self, elem, mode, load, t):
        arr = self.table.get((elem, mode))
        if arr is None:
            return -INF
        lbud = int(min(self.capacity - (load - self.qs[elem]), self.capacity))
        if lbud < 0:
            lbud = 0
        tbud = self.horizon - t + self.tmin_svc[elem][mode]
        if tbud <= 0:
            kbud = 0
        else:
            kbud = min(self.kmax, int(math.ceil(tbud / self.width)))
        return arr[lbud][kbud]


def build_completion_bounds(ctx: BcpContext, duals: DualState,
                            constraints=()) -> CompletionBounds | None:
    """Backward DP with every link at its maximum speed.

    Elementarity is relaxed and per-step time consumption is rounded down,
    so the option set is a superset of the true feasible completions and the
    table is a valid lower bound.  Returns None when the grid would be too
    large to pay off.
    """
    tb = ctx.tb
    n = tb.n
    if n == 0:
        return None
    min_svc = min(ctx.tmin_svc[s][m] for s in range(n)
                  for m in range(tb.n_modes[s]))
    if min_svc <= 0:
        return None
    width = min_svc / 2.0
    kmax = int(math.ceil(ctx.horizon / width)) + 1
    q_int = int(round(ctx.capacity))
    states = [(s, m) for s in range(n) for m in range(tb.n_modes[s])]
    if kmax > 4000 or q_int > 2000 or len(states) * (q_int + 1) * (kmax + 1) > 2e7:
        return None
    pr = Pricer(ctx, duals, constraints)
    rho = duals.rho
    pi = duals.pi
    tmin_t = ctx.tmin_travel
    qs = [int(round(tb.q[s])) for s in range(n)] + [0]

    close_cost = {}
    close_units = {}
    for (s, m) in states:
        ev = tb.end_v[s][m]
        tt = tmin_t[ev][0]
        close_cost[(s, m)] = (ctx.tmin_svc[s][m] + tt - duals.beta[s]
                              - rho[ev][0] - pi[s][tb.depot])
        close_units[(s, m)] = int((ctx.tmin_svc[s][m] + tt) / width)

    step_cost = {}
    step_units = {}
    for (s, m) in states:
        ev = tb.end_v[s][m]
        for (s2, m2) in states:
            sv = tb.start_v[s2][m2]
            if pr._transition_banned(ev, sv, s, s2):
                continue
            tt = tmin_t[ev][sv]
            if not math.isfinite(tt):
                continue
            step_cost[(s, m, s2, m2)] = (ctx.tmin_svc[s][m] + tt
                                         - duals.beta[s] - rho[ev][sv] - pi[s][s2])
            step_units[(s, m, s2, m2)] = int((ctx.tmin_svc[s][m] + tt) / width)

    # V[st][:, k]: best completion cost starting by servicing st, by load and
    # time budget; vectorized over the load axis, k ascending (every service
    # consumes at least one grid unit, so references stay strictly below k).
    V = {st: np.full((q_int + 1, kmax + 1), INF) for st in states}
    trans = {st: [] for st in states}
    for (key, sc) in step_cost.items():
        s, m, s2, m2 = key
        trans[(s, m)].append((step_units[key], sc, (s2, m2)))
    for k in range(kmax + 1):
        for (s, m) in states:
            arr = V[(s, m)]
            q_s = qs[s]
            col = np.full(q_int + 1, INF)
            if close_units[(s, m)] <= k:
                col[q_s:] = close_cost[(s, m)]
            for (su, sc, st2) in trans[(s, m)]:
                if su > k or q_s > q_int:
                    continue
                cand = sc + V[st2][: q_int + 1 - q_s, k - su]
                np.minimum(col[q_s:], cand, out=col[q_s:])
            if k > 0:
                np.minimum(col, arr[:, k - 1], out=col)
            arr[:, k] = np.minimum.accumulate(col)

    B = {st: np.full((q_int + 1, kmax + 1), INF) for st in states}
    for (s, m) in states:
        ev = tb.end_v[s][m]
        arr = B[(s, m)]
        direct_t = tmin_t[ev][0]
        direct = ((direct_t - rho[ev][0] - pi[s][tb.depot])
                  if math.isfinite(direct_t)
                  and not pr._transition_banned(ev, 0, s, tb.depot) else INF)
        direct_u = int(direct_t / width) if math.isfinite(direct_t) else 0
        firsts = []
        for (s2, m2) in states:
            sv = tb.start_v[s2][m2]
            if pr._transition_banned(ev, sv, s, s2):
                continue
            tt = tmin_t[ev][sv]
            if not math.isfinite(tt):
                continue
            firsts.append((int(tt / width), tt - rho[ev][sv] - pi[s][s2], (s2, m2)))
        for k in range(kmax + 1):
            col = np.full(q_int + 1, INF)
            if math.isfinite(direct) and direct_u <= k:
                col[:] = direct
            for (u, c, st2) in firsts:
                if u > k:
                    continue
                np.minimum(col, c + V[st2][:, k - u], out=col)
            if k > 0:
                np.minimum(col, arr[:, k - 1], out=col)
            arr[:, k] = np.minimum.accumulate(col)
    return CompletionBounds(B, width, kmax, ctx.tmin_svc, q_int, ctx.horizon, qs)


# --------------------------------------------------------------- separation


def aggregate_solution(ctx: BcpContext, lam, objective, artificial) -> FracSolution:
    coverage = {s: 0.0 for s in range(ctx.tb.n)}
    btilde = {}
    bhat = {}
    vdeg = {}
    for col, val in zip(ctx.columns, lam):
        if val <= 1e-9:
            continue
        for s, cnt in col.a.items():
            coverage[s] += cnt * val
        for p in col.btilde:
            btilde[p] = btilde.get(p, 0.0) + val
        for p in col.bhat:
            bhat[p] = bhat.get(p, 0.0) + val
            vdeg[p[0]] = vdeg.get(p[0], 0.0) + val
            vdeg[p[1]] = vdeg.get(p[1], 0.0) + val
    return FracSolution(objective, lam, coverage, btilde, bhat, vdeg, artificial)


def separate_odd_edge_cuts(ctx: BcpContext, frac: FracSolution, max_cuts=20):
    """Vertex sets with an odd number of incident required links must be
    crossed by at least one deadhead; candidates are singletons and connected
    components of the deadhead support graph."""
    inst = ctx.inst
    nv = inst.num_vertices
    candidates = [frozenset([v]) for v in range(1, nv)]
    adj = [[] for _ in range(nv)]
    for (i, j), val in frac.bhat.items():
        if val > 1e-6:
            adj[i].append(j)
            adj[j].append(i)
    seen = [False] * nv
    for v0 in range(1, nv):
        if seen[v0]:
            continue
        comp = set()
        stack = [v0]
        while stack:
            x = stack.pop()
            if seen[x] or x == 0:
                continue
            seen[x] = True
            comp.add(x)
            stack.extend(y for y in adj[x] if not seen[y] and y != 0)
        if len(comp) > 1:
            candidates.append(frozenset(comp))
    out = []
    for S in candidates:
        deg_r = sum(1 for l in inst.required_links()
                    if (l.u in S) != (l.v in S))
        if deg_r % 2 == 0:
            continue
        crossing = sum(val for (i, j), val in frac.bhat.items()
                       if (i in S) != (j in S))
        if crossing < 1.0 - INT_TOL:
            cut = Cut("odd_edge", S, 1.0)
            if (cut.kind, cut.members) not in ctx.cut_keys:
                out.append((1.0 - crossing, cut))
    out.sort(key=lambda t: (-t[0], sorted(t[1].members)))
    return [c for _, c in out[:max_cuts]]


def separate_capacity_cuts(ctx: BcpContext, frac: FracSolution, max_cuts=20,
                           exhaustive_limit=12):
    """Service sets S need at least ceil(q(S)/Q) vehicles, so the crossing of
    S in the required graph is at least 2 k(S); exhaustive over subsets at
    desk scale, demand-sorted prefixes beyond."""
    tb = ctx.tb
    n = tb.n
    if n == 0:
        return []
    sets = []
    if n <= exhaustive_limit:
        for mask in range(1, 1 << n):
            sets.append(frozenset(s for s in range(n) if (mask >> s) & 1))
    else:
        order = sorted(range(n), key=lambda s: (-tb.q[s], s))
        for k in range(1, n + 1):
            sets.append(frozenset(order[:k]))
        sets.extend(frozenset([s]) for s in range(n))
    out = []
    seen = set()
    for S in sets:
        if S in seen:
            continue
        seen.add(S)
        kS = math.ceil(sum(tb.q[s] for s in S) / ctx.capacity - 1e-12)
        if kS < 1:
            continue
        crossing = sum(val for (e1, e2), val in frac.btilde.items()
                       if (e1 in S) != (e2 in S))
        if crossing < 2.0 * kS - INT_TOL:
            cut = Cut("capacity", S, 2.0 * kS)
            if (cut.kind, cut.members) not in ctx.cut_keys:
                out.append((2.0 * kS - crossing, cut))
    out.sort(key=lambda t: (-t[0], sorted(t[1].members)))
    return [c for _, c in out[:max_cuts]]


# ------------------------------------------------------------- master solve


def _build_duals(ctx, row_duals, fleet_row, service_rows, cut_rows, branch_rows,
                 branch_cons):
    tb = ctx.tb
    nv = ctx.inst.num_vertices
    gamma = row_duals.get(fleet_row, 0.0)
    beta = [row_duals.get(service_rows[s], 0.0) for s in range(tb.n)]
    rho = np.zeros((nv, nv))
    pi = np.zeros((tb.n + 1, tb.n + 1))
    for cut, rid in cut_rows:
        y = row_duals.get(rid, 0.0)
        if y == 0.0:
            continue
        if cut.kind == "odd_edge":
            ins = np.zeros(nv, dtype=bool)
            ins[list(cut.members)] = True
            rho[np.ix_(ins, ~ins)] += y
            rho[np.ix_(~ins, ins)] += y
        else:
            ins = np.zeros(tb.n + 1, dtype=bool)
            ins[list(cut.members)] = True
            pi[np.ix_(ins, ~ins)] += y
            pi[np.ix_(~ins, ins)] += y
    for con, rid in branch_rows:
        y = row_duals.get(rid, 0.0)
        if y == 0.0:
            continue
        if con.kind == "vertex_deg":
            v = con.key
            rho[v, :] += y
            rho[:, v] += y
            rho[v, v] = 0.0
        elif con.kind == "dh_arc":
            i, j = con.key
            rho[i][j] += y
        else:
            e1, e2 = con.key
            pi[e1][e2] += y
    return DualState(gamma, beta, rho, pi)


def solve_rmp(ctx: BcpContext, node: Node):
    """Assemble and solve the restricted master for one node.

    Returns (objective, lam over ctx.columns, DualState, artificial mass)."""
    tb = ctx.tb
    lp = LinearProgram()
    fleet_row, = lp.add_rows([("=", float(ctx.inst.vehicles), {})])
    service_rows = lp.add_rows([("=", 1.0, {}) for _ in range(tb.n)])
    cut_rows = []
    for cut in ctx.cuts:
        rid, = lp.add_rows([(">=", cut.rhs, {})])
        cut_rows.append((cut, rid))
    branch_rows = []
    filters = [c for c in node.constraints if c.is_filter]
    for con in node.constraints:
        if con.is_filter:
            continue
        rid, = lp.add_rows([(con.sense, con.rhs, {})])
        branch_rows.append((con, rid))
    big = BIG_COST_FACTOR * max(1.0, ctx.horizon)
    cols = []
    for j, col in enumerate(ctx.columns):
        # static rows were laid out in exactly this order (fleet, services,
        # cuts), so the cached coefficient dicts apply verbatim
        coefs = ctx.static_coefs[j]
        if branch_rows:
            coefs = dict(coefs)
            for con, rid in branch_rows:
                c = ctx.branch_coef(con, j)
                if c:
                    coefs[rid] = c
        ub = 0.0 if any(ctx.branch_coef(f, j) > 0 for f in filters) else None
        cols.append((col.cost, coefs, 0.0, ub))
    lp.add_columns(cols)
    n_real = len(ctx.columns)
    art = []
    for s in range(tb.n):
        art.append((big, {service_rows[s]: 1.0}, 0.0, None))
    for cut, rid in cut_rows:
        art.append((big, {rid: 1.0}, 0.0, None))
    for con, rid in branch_rows:
        if con.sense == ">=":
            art.append((big, {rid: 1.0}, 0.0, None))
    lp.add_columns(art)
    obj, x, row_duals = lp.solve_relaxation()
    lam = x[:n_real]
    artificial = sum(x[n_real:])
    duals = _build_duals(ctx, row_duals, fleet_row, service_rows, cut_rows,
                         branch_rows, node.constraints)
    return obj, lam, duals, artificial


def solve_node_cg(ctx: BcpContext, node: Node, fast_only=False,
                  max_cut_rounds=8, mu=0.5, deadline=None):
    """Column generation with stabilization, layered pricing and cutting.

    Returns a FracSolution whose objective is a valid node lower bound (when
    fast_only is False and the artificial mass is zero)."""
    alpha = 0.9
    prev = None
    cut_rounds = 0
    exact_calls_here = 0
    fast_iters = 0
    for _ in range(100000):
        ctx.stats["cg_iterations"] += 1
        if deadline is not None and time.perf_counter() > deadline:
            raise TimeLimitReached
        obj, lam, cur, artificial = solve_rmp(ctx, node)
        if fast_only:
            fast_iters += 1
            if fast_iters <= 6:
                cols = price_fast(ctx, cur, node.constraints)
                if _add_new(ctx, cols):
                    continue
            return aggregate_solution(ctx, lam, obj, artificial)
        # heuristic pricing ladder at the stabilized duals; every failure
        # steps the stabilization down until the true duals are priced
        added = False
        while True:
            used = DualState.blend(prev, cur, alpha)
            prev = used
            cols = price_fast(ctx, used, node.constraints)
            if _add_new(ctx, cols):
                added = True
                break
            cols = price_heuristic_dominance(ctx, used, mu, node.constraints)
            if _add_new(ctx, cols):
                added = True
                break
            if alpha <= 0.0:
                break
            alpha = max(0.0, round(alpha - 0.1, 10))
        if added:
            continue
        # heuristics exhausted at the true duals: one exact run either finds
        # columns or proves the column generation complete
        bounds = build_completion_bounds(ctx, used, node.constraints)
        exact_calls_here += 1
        cols = price_exact(ctx, used, node.constraints, bounds)
        if _add_new(ctx, cols):
            continue
        # pricing optimal for the true duals: try to cut, else done
        if cut_rounds < max_cut_rounds:
            frac = aggregate_solution(ctx, lam, obj, artificial)
            cuts = (separate_odd_edge_cuts(ctx, frac)
                    + separate_capacity_cuts(ctx, frac))
            added = False
            for cut in cuts:
                added = ctx.add_cut(cut) or added
            if added:
                # stabilization stays off for the rest of the node: the
                # descent already reached the true duals once
                cut_rounds += 1
                prev = None
                continue
        if exact_calls_here == 1:
            ctx.stats["single_exact_nodes"] += 1
        return aggregate_solution(ctx, lam, obj, artificial)
    raise RuntimeError("column generation did not converge")


def _add_new(ctx: BcpContext, cols) -> bool:
    added = False
    for col in cols:
        added = ctx.add_column(col) or added
    return added


# ---------------------------------------------------------------- branching


def strong_branch_rank(z_left: float, z_right: float, alpha: float = 0.75) -> float:
    """Candidate score: alpha * min(child bounds) + (1 - alpha) * max."""
    return alpha * min(z_left, z_right) + (1 - alpha) * max(z_left, z_right)


def _fractional_candidates(frac: FracSolution, limit=50):
    cands = []
    for v, val in sorted(frac.vdeg.items()):
        f = abs(val - round(val))
        if f > INT_TOL:
            cands.append((f, "vertex_deg", v, val))
    for (i, j), val in sorted(frac.bhat.items()):
        f = abs(val - round(val))
        if f > INT_TOL:
            cands.append((f, "dh_arc", (i, j), val))
    for (e1, e2), val in sorted(frac.btilde.items()):
        f = abs(val - round(val))
        if f > INT_TOL:
            cands.append((f, "req_arc", (e1, e2), val))
    cands.sort(key=lambda t: (-t[0], t[1], str(t[2])))
    return cands[:limit]


def _child_constraints(kind, key, value):
    lo = math.floor(value + INT_TOL)
    hi = lo + 1
    left = BranchConstraint(kind, key, "<=", float(lo))
    right = BranchConstraint(kind, key, ">=", float(hi))
    return left, right


def branch(ctx: BcpContext, node: Node, frac: FracSolution, rank_alpha=0.75,
           candidate_limit=50, deadline=None):
    """Pick the strong-branching winner and return its two children."""
    cands = _fractional_candidates(frac, candidate_limit)
    if not cands:
        raise LpBackendFailure("no fractional entity to branch on")
    best = None
    if len(cands) == 1:
        _, kind, key, value = cands[0]
        chosen = (kind, key, value)
    else:
        for (_, kind, key, value) in cands:
            left, right = _child_constraints(kind, key, value)
            zs = []
            for con in (left, right):
                child = Node(-1, node.depth + 1, node.bound,
                             node.constraints + (con,))
                ctx.stats["nodes_heuristic"] += 1
                try:
                    res = solve_node_cg(ctx, child, fast_only=True,
                                        deadline=deadline)
                    z = res.objective if res.artificial <= INT_TOL else INF
                except LpBackendFailure:
                    z = INF
                zs.append(z)
            score = strong_branch_rank(zs[0], zs[1], rank_alpha)
            if best is None or score > best[0] + 1e-12:
                best = (score, kind, key, value)
        chosen = best[1:]
    kind, key, value = chosen
    left, right = _child_constraints(kind, key, value)
    return left, right


# ------------------------------------------------------------ integrality


def integral_routes(ctx: BcpContext, frac: FracSolution):
    """When every required-graph arc mass is integral, the successor map is
    unique; returns the service sequences, else None."""
    tb = ctx.tb
    for val in frac.btilde.values():
        if abs(val - round(val)) > INT_TOL:
            return None
    succ = {}
    starts = []
    for (e1, e2), val in sorted(frac.btilde.items()):
        r = int(round(val))
        if r == 0:
            continue
        if e1 == tb.depot:
            starts.extend([e2] * r)
        else:
            if e1 in succ:
                return None
            succ[e1] = e2
    routes = []
    visited = set()
    for s0 in starts:
        seq = []
        cur = s0
        while cur != tb.depot:
            if cur in visited:
                return None
            visited.add(cur)
            seq.append(cur)
            cur = succ.get(cur, tb.depot)
        if seq:
            routes.append(seq)
    if len(visited) != tb.n:
        return None
    return routes


# ------------------------------------------------------------------ driver


@dataclass
class BcpResult:
    lb: float
    ub: float
    gap_percent: float
    nodes_exact: int
    nodes_heuristic: int
    columns: int
    cuts: int
    wall_seconds: float
    optimal: bool
    best_plan: RoutePlan | None
    stats: dict = field(default_factory=dict)

    def record(self) -> dict:
        return {
            "lb": self.lb,
            "ub": self.ub,
            "gap_percent": self.gap_percent,
            "nodes_exact": self.nodes_exact,
            "nodes_heuristic": self.nodes_heuristic,
            "columns": self.columns,
            "cuts": self.cuts,
            "wall_seconds": self.wall_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.record(), indent=2, sort_keys=True)


def initial_columns(ctx: BcpContext, warm_sequences=None):
    tb = ctx.tb
    ctx.add_column(empty_column(tb))
    for s in range(tb.n):
        dec = decode_route(tb, [s])
        ctx.add_column(make_column(tb, list(zip([s], dec.modes))))
    if warm_sequences:
        for seq in warm_sequences:
            sidx = [tb.index_of[lid] if lid in tb.index_of else lid for lid in seq]
            dec = decode_route(tb, sidx)
            ctx.add_column(make_column(tb, list(zip(sidx, dec.modes))))


def run_bcp(inst: Instance, pm: ProfileMatrix, initial_upper_bound=INF,
            warm_routes=None, time_limit=None, tables=None, node_cap=100_000,
            candidate_limit=50) -> BcpResult:
    """Best-bound branch-cut-and-price; warm_routes (link-id sequences) seed
    the column pool and initial_upper_bound primes pruning."""
    t0 = time.perf_counter()
    deadline = t0 + time_limit if time_limit is not None else None
    ctx = BcpContext(inst, pm, tables)
    tb = ctx.tb
    initial_columns(ctx, warm_routes)
    ub = float(initial_upper_bound)
    best_plan = None
    if warm_routes:
        seqs = [[tb.index_of.get(lid, lid) for lid in r] for r in warm_routes]
        plan = plan_from_sequences(tb, seqs)
        if plan.feasible and plan.total_duration <= ub + 1e-9:
            ub = min(ub, plan.total_duration)
            best_plan = plan
    counter = 0
    root = Node(counter, 0, -INF, ())
    heap = [root]
    lost_bound = INF
    optimal = True
    timed_out = False
    while heap:
        if deadline is not None and time.perf_counter() > deadline:
            timed_out = True
            break
        node = heapq.heappop(heap)
        if node.bound >= ub - PRUNE_TOL:
            continue
        try:
            frac = solve_node_cg(ctx, node, deadline=deadline)
        except TimeLimitReached:
            heapq.heappush(heap, node)
            timed_out = True
            break
        except LpBackendFailure:
            continue
        ctx.stats["nodes_exact"] += 1
        if frac.artificial > INT_TOL:
            continue  # infeasible under the branching constraints
        node_lb = frac.objective
        if node_lb >= ub - PRUNE_TOL:
            continue
        routes = integral_routes(ctx, frac)
        if routes is not None:
            plan = plan_from_sequences(tb, routes)
            cand = plan.total_duration
            if cand > node_lb + 1e-4:
                raise AssertionError(
                    "re-decoded integral solution above the node bound")
            if cand < ub - 1e-12:
                ub = cand
                best_plan = plan
            continue
        try:
            left, right = branch(ctx, node, frac, candidate_limit=candidate_limit,
                                 deadline=deadline)
        except TimeLimitReached:
            heapq.heappush(heap, Node(node.id, node.depth, node_lb,
                                      node.constraints))
            timed_out = True
            break
        for con in (left, right):
            counter += 1
            heapq.heappush(heap, Node(counter, node.depth + 1, node_lb,
                                      node.constraints + (con,)))
        if len(heap) > node_cap:
            heap.sort()
            dropped = heap[node_cap:]
            del heap[node_cap:]
            heapq.heapify(heap)
            lost_bound = min(lost_bound, min(n.bound for n in dropped))
            optimal = False
    frontier = min((n.bound for n in heap), default=INF)
    lb = min(ub, frontier, lost_bound)
    if timed_out:
        optimal = False
    optimal = optimal and not heap and not timed_out
    if optimal:
        lb = ub
    gap = 0.0 if ub <= lb + 1e-9 else (100.0 * (ub - lb) / lb if lb > 0 else INF)
    return BcpResult(
        lb=lb, ub=ub, gap_percent=gap,
        nodes_exact=ctx.stats["nodes_exact"],
        nodes_heuristic=ctx.stats["nodes_heuristic"],
        columns=len(ctx.columns), cuts=len(ctx.cuts),
        wall_seconds=time.perf_counter() - t0,
        optimal=optimal, best_plan=best_plan, stats=dict(ctx.stats))
