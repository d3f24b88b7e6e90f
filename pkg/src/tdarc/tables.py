"""Shared per-instance tables over the profile matrix.

Indexes the required links as services 0..n-1 (plus a depot pseudo-service n
with a single mode at vertex 0), and precomputes everything the solvers hit
in inner loops: oriented endpoints, service-time minima, quickest-path
min-gap values between every oriented service pair, a static proximity
estimate, proximity lists, and neighbor-memory bitmasks.

The proximity estimate between two services is half the first service time
at departure 0, plus the quickest travel at departure 0 between the matching
endpoints, plus half the second service time, minimized over orientation
combinations; one notion of proximity serves both the neighbor lists of the
local search and the neighbor-memory sets of the pricing relaxation.
"""

from __future__ import annotations

import math

from .network import Instance
from .profiles import ProfileMatrix

INF = math.inf


class ServiceTables:
    def __init__(self, inst: Instance, pm: ProfileMatrix, prox_count: int = 15,
                 ng_size: int = 4):
        self.inst = inst
        self.pm = pm
        self.services = list(inst.required_ids)      # service idx -> link id
        self.n = len(self.services)
        self.depot = self.n                           # pseudo-element
        self.index_of = {lid: i for i, lid in enumerate(self.services)}

        n = self.n
        self.q = [0.0] * (n + 1)
        self.dist = [0.0] * (n + 1)
        self.n_modes = [1] * (n + 1)
        self.start_v = [[0, 0] for _ in range(n + 1)]
        self.end_v = [[0, 0] for _ in range(n + 1)]
        self.svc_gap = [[INF, INF] for _ in range(n + 1)]
        self.svc_time0 = [[INF, INF] for _ in range(n + 1)]
        for s, lid in enumerate(self.services):
            link = inst.link(lid)
            self.q[s] = link.demand
            self.dist[s] = link.dist
            self.n_modes[s] = 2 if link.kind == "E" else 1
            for m in range(self.n_modes[s]):
                sv, ev = inst.oriented_endpoints(lid, m + 1)
                self.start_v[s][m] = sv
                self.end_v[s][m] = ev
                self.svc_gap[s][m] = pm.service_min_gap(lid, m + 1)
                fn = pm.funcs.service[(lid, m)]
                self.svc_time0[s][m] = fn.value(0.0)
        # depot pseudo-service: zero-length, single mode, at vertex 0
        self.svc_gap[self.depot][0] = 0.0
        self.svc_time0[self.depot][0] = 0.0

        # min travel gap between end(e1, m1) and start(e2, m2)
        self.gap = [[[[INF, INF] for _ in range(n + 1)] for _ in range(2)]
                    for _ in range(n + 1)]
        for e1 in range(n + 1):
            for m1 in range(self.n_modes[e1]):
                row = self.gap[e1][m1]
                ev = self.end_v[e1][m1]
                for e2 in range(n + 1):
                    for m2 in range(self.n_modes[e2]):
                        row[e2][m2] = pm.min_gap(ev, self.start_v[e2][m2])

        # static distance estimate between services, minimized over modes
        self.est = [[INF] * n for _ in range(n)]
        for s1 in range(n):
            for s2 in range(n):
                if s1 == s2:
                    self.est[s1][s2] = 0.0
                    continue
                best = INF
                for m1 in range(self.n_modes[s1]):
                    half1 = self.svc_time0[s1][m1] / 2.0
                    ev = self.end_v[s1][m1]
                    for m2 in range(self.n_modes[s2]):
                        tr = pm.function(ev, self.start_v[s2][m2]).value_or_inf(0.0)
                        cand = half1 + tr + self.svc_time0[s2][m2] / 2.0
                        if cand < best:
                            best = cand
                self.est[s1][s2] = best

        self.prox = []
        for s in range(n):
            others = sorted((idx for idx in range(n) if idx != s),
                            key=lambda idx: (self.est[s][idx], idx))
            self.prox.append(others[:prox_count])

        self.ng_mask = []
        for s in range(n):
            closest = sorted((idx for idx in range(n) if idx != s),
                             key=lambda idx: (self.est[s][idx], idx))
            mask = 1 << s
            for idx in closest[: max(0, ng_size - 1)]:
                mask |= 1 << idx
            self.ng_mask.append(mask)

    # -- element helpers -----------------------------------------------

    def nmodes(self, e: int) -> int:
        return self.n_modes[e]

    def start(self, e: int, m: int) -> int:
        return self.start_v[e][m]

    def end(self, e: int, m: int) -> int:
        return self.end_v[e][m]

    def link_id(self, s: int) -> int:
        return self.services[s]

    # -- timed queries ---------------------------------------------------

    def travel(self, e1: int, m1: int, e2: int, m2: int, t: float) -> float:
        """Arrival at start(e2, m2) leaving end(e1, m1) at t; inf if the
        horizon is exceeded."""
        return self.pm.arrival_or_inf(self.end_v[e1][m1], self.start_v[e2][m2], t)

    def travel_extended(self, e1, m1, e2, m2, t):
        return self.pm.arrival_extended(self.end_v[e1][m1], self.start_v[e2][m2], t)

    def complete(self, e: int, m: int, t: float) -> float:
        """Completion time of servicing element e in mode m from time t."""
        if e == self.depot:
            return t
        return self.pm.service_completion(self.services[e], m + 1, t)

    def complete_extended(self, e, m, t):
        if e == self.depot:
            return t
        return self.pm.service_completion_extended(self.services[e], m + 1, t)
