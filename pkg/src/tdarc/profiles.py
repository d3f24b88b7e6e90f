"""Continuous quickest-path profiles between all relevant origin-destination
pairs, a fixed-departure discrete oracle with path recovery, and the min-gap
values consumed by the move lower bounds.

The profile builder is a Bellman-Ford style fixpoint where each label is a
closed-form arrival function: relaxation replaces scalar comparison by a
lower envelope of the current function and (link function o current
function).  Profiles are computed from the depot and from every endpoint a
service can finish or start at; each stored function carries a bucket index
and its precomputed min gap.

Calls for distinct origins are independent (pure given the instance) and may
run concurrently; a ProfileMatrix is immutable once built.
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import pltime
from .network import Instance, ServiceRef
from .pltime import (
    INF,
    ArrivalBeyondHorizon,
    ArrivalFunction,
    QueryOutOfDomain,
    QueryStats,
    arrival_query_iterative,
    bucket_query,
    build_arrival_function,
    build_bucket_index,
    compose,
    functions_equal,
    identity,
    lower_envelope,
    tolerance,
)

CACHE_VERSION = 1

# Equality tolerance for the fixpoint test: much finer than the reporting
# tolerance so sub-epsilon improvements still propagate.
FIXPOINT_REL = 1e-12


class NonTermination(Exception):
    """Defensive guard: the relaxation did not stabilize within |V| rounds."""


class Unreachable(Exception):
    """No path reaches the target before the hard time cap."""


class LinkFunctions:
    """Closed-form travel and service arrival functions per oriented link."""

    def __init__(self, inst: Instance, bucket_count=None):
        if not inst.has_profiles:
            raise ValueError("instance has no speed profiles")
        if not math.isfinite(inst.duration_limit):
            raise ValueError("profiles need a finite duration limit")
        self.inst = inst
        self.eps = tolerance(inst.duration_limit)
        self.travel = {}
        self.travel_idx = {}
        self.service = {}
        self.service_idx = {}
        self.service_gap = {}
        for link in inst.links:
            for (d, _, _) in inst.directions(link):
                fn = build_arrival_function(inst.travel_speed(link.id, d), link.dist,
                                            inst.duration_limit)
                self.travel[(link.id, d)] = fn
                self.travel_idx[(link.id, d)] = build_bucket_index(
                    fn, bucket_count, horizon=inst.duration_limit)
                if link.required:
                    sfn = build_arrival_function(inst.service_speed(link.id, d),
                                                 link.dist, inst.duration_limit)
                    self.service[(link.id, d)] = sfn
                    self.service_idx[(link.id, d)] = build_bucket_index(
                        sfn, bucket_count, horizon=inst.duration_limit)
                    self.service_gap[(link.id, d)] = sfn.min_gap()

    def service_completion(self, link_id, direction, t, stats=None):
        """Completion time of servicing the oriented link from time t; inf when
        the service cannot finish within the horizon."""
        fn = self.service[(link_id, direction)]
        if t < fn._xl[0] or t > fn._xl[-1]:
            return INF
        return bucket_query(fn, self.service_idx[(link_id, direction)], t, stats)

    def service_completion_extended(self, link_id, direction, t):
        return self.service[(link_id, direction)].value_extended(t)


def relevant_origins(inst: Instance):
    """Depot plus every vertex where a service can start or finish."""
    origins = {0}
    for link in inst.required_links():
        if link.kind == "E":
            origins.add(link.u)
            origins.add(link.v)
        else:
            origins.add(link.v)
    return sorted(origins)


def _adjacency(inst: Instance, funcs: LinkFunctions):
    out = [[] for _ in range(inst.num_vertices)]
    for link in inst.links:
        for (d, s, e) in inst.directions(link):
            out[s].append((e, funcs.travel[(link.id, d)]))
    return out


def profile_from_origin(inst: Instance, funcs: LinkFunctions, origin: int):
    """Earliest-arrival function to every vertex for all departure times.

    Round-based relaxation over the closed-form functions; each round applies
    a lower envelope of the stored function and the composition of a link
    function after the origin function of the link's tail.
    """
    D = inst.duration_limit
    eps = tolerance(D)
    eps_fix = FIXPOINT_REL * D
    nv = inst.num_vertices
    out = _adjacency(inst, funcs)
    psi = [pltime.INFEASIBLE] * nv
    psi_new = [pltime.INFEASIBLE] * nv
    psi[origin] = psi_new[origin] = identity(D)
    active = {origin}
    rounds = 0
    while active:
        for x in sorted(active):
            fx = psi[x]
            for (y, phi) in out[x]:
                cand = compose(phi, fx, eps)
                psi_new[y] = lower_envelope(psi_new[y], cand, eps)
        active = set()
        for y in range(nv):
            if not functions_equal(psi[y], psi_new[y], eps_fix):
                active.add(y)
                psi[y] = psi_new[y]
        rounds += 1
        if rounds > nv + 1:
            raise NonTermination(
                f"profiles from {origin} still changing after {rounds} rounds")
    return {v: psi[v] for v in range(nv)}


class ProfileMatrix:
    """Bucket-indexed quickest-path functions from every relevant origin."""

    def __init__(self, inst, funcs, psi, indexes, gaps, origins, build_seconds,
                 stats=None):
        self.inst = inst
        self.funcs = funcs
        self.psi = psi            # (origin, vertex) -> ArrivalFunction
        self.indexes = indexes    # (origin, vertex) -> BucketIndex
        self.gaps = gaps          # (origin, vertex) -> float
        self.origins = origins
        self.build_seconds = build_seconds
        self.stats = stats        # QueryStats or None
        self.use_buckets = True   # False forces plain binary-search evaluation

    # -- telemetry -------------------------------------------------------

    @property
    def total_pieces(self) -> int:
        return sum(f.piece_count for f in self.psi.values() if not f.is_infeasible)

    @property
    def mean_pieces(self) -> float:
        finite = [f.piece_count for f in self.psi.values() if not f.is_infeasible]
        return sum(finite) / len(finite) if finite else 0.0

    # -- queries -----------------------------------------------------------

    def function(self, origin: int, vertex: int) -> ArrivalFunction:
        return self.psi[(origin, vertex)]

    def arrival(self, origin: int, vertex: int, t: float) -> float:
        """Earliest arrival at vertex leaving origin at t; raises
        QueryOutOfDomain when no arrival within the horizon exists."""
        fn = self.psi[(origin, vertex)]
        if fn.is_infeasible:
            raise QueryOutOfDomain(f"{vertex} unreachable from {origin}")
        if self.use_buckets:
            return bucket_query(fn, self.indexes[(origin, vertex)], t, self.stats)
        if self.stats is not None:
            self.stats.binary_searches += 1
        return fn.value(t)

    def arrival_or_inf(self, origin: int, vertex: int, t: float) -> float:
        fn = self.psi[(origin, vertex)]
        if fn.is_infeasible or t < fn._xl[0] or t > fn._xl[-1]:
            return INF
        if self.use_buckets:
            return bucket_query(fn, self.indexes[(origin, vertex)], t, self.stats)
        if self.stats is not None:
            self.stats.binary_searches += 1
        return fn.value(t)

    def arrival_extended(self, origin: int, vertex: int, t: float) -> float:
        fn = self.psi[(origin, vertex)]
        if fn.is_infeasible:
            return INF
        if fn.domain_start <= t <= fn.domain_end:
            return self.arrival(origin, vertex, t)
        return fn.value_extended(t)

    def min_gap(self, origin: int, vertex: int) -> float:
        return self.gaps[(origin, vertex)]

    def service_completion(self, link_id, mode, t):
        return self.funcs.service_completion(link_id, mode - 1, t, self.stats)

    def service_completion_extended(self, link_id, mode, t):
        return self.funcs.service_completion_extended(link_id, mode - 1, t)

    def service_min_gap(self, link_id, mode):
        return self.funcs.service_gap[(link_id, mode - 1)]


def build_profile_matrix(inst: Instance, bucket_count=None,
                         collect_stats=False) -> ProfileMatrix:
    """Profiles from every relevant origin, with min gaps as a by-product."""
    t0 = time.perf_counter()
    funcs = LinkFunctions(inst, bucket_count)
    origins = relevant_origins(inst)
    psi = {}
    indexes = {}
    gaps = {}
    for o in origins:
        row = profile_from_origin(inst, funcs, o)
        for v, fn in row.items():
            psi[(o, v)] = fn
            gaps[(o, v)] = fn.min_gap()
            if not fn.is_infeasible:
                indexes[(o, v)] = build_bucket_index(fn, bucket_count,
                                                     horizon=inst.duration_limit)
    stats = QueryStats() if collect_stats else None
    return ProfileMatrix(inst, funcs, psi, indexes, gaps, origins,
                         time.perf_counter() - t0, stats)


def mode_pair_arrival(pm: ProfileMatrix, from_service: ServiceRef,
                      to_service: ServiceRef, t: float) -> float:
    """Arrival at the start of to_service when leaving the end of
    from_service at time t (bucket-indexed query)."""
    _, end = from_service.endpoints(pm.inst)
    start, _ = to_service.endpoints(pm.inst)
    return pm.arrival(end, start, t)


# ------------------------------------------------------------ discrete oracle


@dataclass
class DiscretePath:
    vertices: list
    departure: float
    arrival: float


def discrete_quickest_path(inst: Instance, i: int, j: int, t: float,
                           cap=None) -> DiscretePath:
    """Label-correcting earliest-arrival search for one fixed departure time.

    Uses the iterative integral query per link, independent of the
    closed-form machinery; serves as the oracle for the profiles and as the
    final-solution path reconstruction.
    """
    if t < 0:
        raise ValueError("departure must be nonnegative")
    if cap is None:
        cap = 2.0 * inst.duration_limit
    best = {i: t}
    pred = {}
    queue = deque([i])
    inqueue = {i}
    out = [[] for _ in range(inst.num_vertices)]
    for link in inst.links:
        for (d, s, e) in inst.directions(link):
            out[s].append((e, link, d))
    while queue:
        x = queue.popleft()
        inqueue.discard(x)
        tx = best[x]
        for (y, link, d) in out[x]:
            try:
                ay = arrival_query_iterative(inst.travel_speed(link.id, d),
                                             link.dist, tx, cap=cap)
            except ArrivalBeyondHorizon:
                continue
            if ay < best.get(y, INF) - 1e-15:
                best[y] = ay
                pred[y] = x
                if y not in inqueue:
                    queue.append(y)
                    inqueue.add(y)
    if j not in best:
        raise Unreachable(f"{j} unreachable from {i} departing at {t:g}")
    path = [j]
    while path[-1] != i:
        path.append(pred[path[-1]])
    path.reverse()
    return DiscretePath(path, t, best[j])


# -------------------------------------------------------------------- cache


def save_profile_cache(pm: ProfileMatrix, path: str) -> None:
    """Binary cache: versioned JSON header plus per-function knot arrays."""
    header = {
        "version": CACHE_VERSION,
        "instance_hash": pm.inst.content_hash(),
        "origins": pm.origins,
        "build_seconds": pm.build_seconds,
        "keys": [[o, v] for (o, v) in sorted(pm.psi)],
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for n, (o, v) in enumerate(sorted(pm.psi)):
        fn = pm.psi[(o, v)]
        arrays[f"x{n}"] = fn.x
        arrays[f"y{n}"] = fn.y
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_profile_cache(inst: Instance, path: str, bucket_count=None,
                       collect_stats=False) -> ProfileMatrix:
    """Rebuild a ProfileMatrix from a cache file; validates the content hash."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CACHE_VERSION:
            raise ValueError(f"cache version {header.get('version')} unsupported")
        if header["instance_hash"] != inst.content_hash():
            raise ValueError("cache was built for a different instance")
        psi = {}
        for n, (o, v) in enumerate(header["keys"]):
            x = data[f"x{n}"]
            y = data[f"y{n}"]
            psi[(int(o), int(v))] = (ArrivalFunction(x, y) if x.size
                                     else pltime.INFEASIBLE)
    funcs = LinkFunctions(inst, bucket_count)
    indexes = {}
    gaps = {}
    for key, fn in psi.items():
        gaps[key] = fn.min_gap()
        if not fn.is_infeasible:
            indexes[key] = build_bucket_index(fn, bucket_count,
                                              horizon=inst.duration_limit)
    stats = QueryStats() if collect_stats else None
    return ProfileMatrix(inst, funcs, psi, indexes, gaps,
                         [int(o) for o in header["origins"]],
                         header["build_seconds"], stats)
