"""Instance model, file formats, speed-profile generation and scenario noise.

An instance is an undirected network with edges and arcs, a subset of links
requiring service (demand > 0), a fleet size, a capacity and a duration
limit.  Each oriented link carries a travel speed profile and a
travel-and-service speed profile.

RNG policy ("profile-gen-v1"): all draws use numpy PCG64 seeded through
SeedSequence(seed, spawn_key=...) with one stream per oriented link (and per
scenario for perturbations), so adding links or scenarios never changes the
draws of earlier ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.stats import truncnorm

from .pltime import SpeedFunction

INF = math.inf

# Uniform speed bounds [a_k, b_k] per segment k for the three time-dependency
# levels used when generating profiles (7 segments, 6 breakpoints).
SPEED_BOUNDS = {
    "L": [(0.6, 0.9), (0.8, 1.0), (1.0, 1.3), (0.9, 1.1), (1.0, 1.3), (0.8, 1.0), (0.6, 0.9)],
    "M": [(0.5, 0.8), (0.7, 1.0), (1.0, 1.4), (0.8, 1.2), (1.0, 1.4), (0.7, 1.0), (0.5, 0.8)],
    "H": [(0.4, 0.7), (0.6, 1.0), (1.0, 1.6), (0.7, 1.3), (1.0, 1.6), (0.6, 1.0), (0.4, 0.7)],
}

SERVICE_SPEED_FACTOR = 0.7
BREAKPOINT_GRID_STEPS = 19          # 0.05 D, 0.10 D, ..., 0.95 D
BREAKPOINTS_PER_LINK = 6


class ParseError(Exception):
    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class InvariantViolation(Exception):
    def __init__(self, message, entity=None):
        if entity is not None:
            message = f"{message} ({entity})"
        super().__init__(message)
        self.entity = entity


class Link:
    """One edge or arc: kind 'E' (bidirectional) or 'A' (oriented u -> v)."""

    __slots__ = ("id", "kind", "u", "v", "dist", "demand")

    def __init__(self, id, kind, u, v, dist, demand):
        self.id = int(id)
        self.kind = kind
        self.u = int(u)
        self.v = int(v)
        self.dist = float(dist)
        self.demand = float(demand)

    @property
    def required(self) -> bool:
        return self.demand > 0

    def as_tuple(self):
        return (self.id, self.kind, self.u, self.v, self.dist, self.demand)

    def __eq__(self, other):
        return isinstance(other, Link) and self.as_tuple() == other.as_tuple()

    def __repr__(self):
        return f"Link({self.kind}{self.id}: {self.u}-{self.v}, d={self.dist:g}, q={self.demand:g})"


@dataclass(frozen=True)
class ServiceRef:
    """A required link together with its chosen service orientation (mode 1 or 2)."""

    link_id: int
    mode: int

    def endpoints(self, inst: "Instance"):
        return inst.oriented_endpoints(self.link_id, self.mode)


@dataclass(frozen=True)
class ScenarioSpec:
    """Perturbation request: piece speeds scaled by truncated-normal factors."""

    sigma: float
    seed: int
    count: int

    def __post_init__(self):
        if not (0.0 < self.sigma < 1.0):
            raise InvariantViolation(f"sigma must lie in (0, 1), got {self.sigma}")
        if self.count < 1:
            raise InvariantViolation("scenario count must be >= 1")


class Instance:
    """Immutable problem instance.  Depot is vertex 0.

    travel_speeds / service_speeds map (link_id, direction) to a
    SpeedFunction, direction 0 = u->v and 1 = v->u; arcs only have
    direction 0.  Mode 1 services a link in direction 0, mode 2 (edges only)
    in direction 1.
    """

    def __init__(self, name, num_vertices, links, vehicles, capacity,
                 duration_limit, travel_speeds=None, service_speeds=None):
        self.name = str(name)
        self.num_vertices = int(num_vertices)
        self.links = list(links)
        self.vehicles = int(vehicles)
        self.capacity = float(capacity)
        self.duration_limit = float(duration_limit)
        self.travel_speeds = dict(travel_speeds) if travel_speeds else {}
        self.service_speeds = dict(service_speeds) if service_speeds else {}
        self.required_ids = [l.id for l in self.links if l.required]
        self._by_id = {l.id: l for l in self.links}

    # -- structure -----------------------------------------------------

    @property
    def num_services(self) -> int:
        return len(self.required_ids)

    @property
    def has_profiles(self) -> bool:
        return bool(self.travel_speeds)

    def link(self, link_id: int) -> Link:
        return self._by_id[link_id]

    def required_links(self):
        return [self._by_id[i] for i in self.required_ids]

    def modes(self, link_id: int):
        return (1, 2) if self._by_id[link_id].kind == "E" else (1,)

    def oriented_endpoints(self, link_id: int, mode: int):
        """(start, end) vertices when servicing/traversing in the given mode."""
        l = self._by_id[link_id]
        if mode == 1:
            return l.u, l.v
        if mode == 2 and l.kind == "E":
            return l.v, l.u
        raise InvariantViolation(f"mode {mode} invalid for link {link_id}", l)

    def directions(self, link: Link):
        """Traversal directions as (direction, start, end) tuples."""
        if link.kind == "E":
            return ((0, link.u, link.v), (1, link.v, link.u))
        return ((0, link.u, link.v),)

    def travel_speed(self, link_id: int, direction: int) -> SpeedFunction:
        return self.travel_speeds[(link_id, direction)]

    def service_speed(self, link_id: int, direction: int) -> SpeedFunction:
        return self.service_speeds[(link_id, direction)]

    # -- validation ------------------------------------------------------

    def validate(self):
        if self.num_vertices < 1:
            raise InvariantViolation("instance needs at least the depot vertex")
        if self.num_services == 0:
            raise InvariantViolation("instance must contain at least one required link")
        if self.vehicles < 1:
            raise InvariantViolation("fleet size must be >= 1")
        if not self.capacity > 0:
            raise InvariantViolation("capacity must be positive")
        if not self.duration_limit > 0:
            raise InvariantViolation("duration limit must be positive")
        seen = set()
        for l in self.links:
            if l.id in seen:
                raise InvariantViolation("duplicate link id", l)
            seen.add(l.id)
            if l.kind not in ("E", "A"):
                raise InvariantViolation("link kind must be E or A", l)
            if not (0 <= l.u < self.num_vertices and 0 <= l.v < self.num_vertices):
                raise InvariantViolation("endpoint outside vertex range", l)
            if not l.dist > 0:
                raise InvariantViolation("distance must be positive", l)
            if l.demand < 0:
                raise InvariantViolation("demand must be nonnegative", l)
            if l.demand > self.capacity:
                raise InvariantViolation(
                    f"demand {l.demand:g} exceeds capacity {self.capacity:g}", l)
        for (lid, d), fn in self.travel_speeds.items():
            link = self._by_id.get(lid)
            if link is None or (d == 1 and link.kind == "A") or d not in (0, 1):
                raise InvariantViolation("speed profile attached to invalid direction",
                                         (lid, d))
            if fn.horizon != self.duration_limit and math.isfinite(self.duration_limit):
                raise InvariantViolation("speed horizon differs from duration limit",
                                         (lid, d))
        return self

    # -- equality / hashing -----------------------------------------------

    def _key(self):
        return (
            self.name, self.num_vertices,
            tuple(l.as_tuple() for l in self.links),
            self.vehicles, self.capacity, self.duration_limit,
            tuple(sorted((k, v.breakpoints, v.speeds, v.horizon)
                         for k, v in self.travel_speeds.items())),
            tuple(sorted((k, v.breakpoints, v.speeds, v.horizon)
                         for k, v in self.service_speeds.items())),
        )

    def __eq__(self, other):
        return isinstance(other, Instance) and self._key() == other._key()

    def content_hash(self) -> str:
        import hashlib
        return hashlib.sha256(serialize_instance(self).encode()).hexdigest()[:16]

    def __repr__(self):
        return (f"Instance({self.name!r}: |V|={self.num_vertices}, "
                f"links={len(self.links)}, services={self.num_services})")


# ----------------------------------------------------------------- parsing


def _num(tok: str, line_no: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"expected a number, got {tok!r}", line_no)


def _rescale_integral_demands(links, capacity):
    """Scale demands and capacity by a power of ten until all are integral."""
    values = [l.demand for l in links] + [capacity]
    for k in range(10):
        f = 10 ** k
        if all(abs(v * f - round(v * f)) < 1e-9 for v in values):
            if k == 0:
                return links, capacity
            for l in links:
                l.demand = float(round(l.demand * f))
            return links, float(round(capacity * f))
    raise InvariantViolation("demands cannot be rescaled to integers")


def parse_instance(text: str, format: str = "td_native") -> Instance:
    """Parse an instance from its textual form.

    format 'td_native' reads the package's own profile-carrying format;
    'classic_carp' reads the common benchmark .dat layouts (uniform speed 1
    is assumed until profiles are attached).
    """
    if format == "td_native":
        inst = _parse_native(text)
    elif format == "classic_carp":
        inst = _parse_classic(text)
    else:
        raise ValueError(f"unknown format {format!r}")
    return inst.validate()


def _parse_native(text: str) -> Instance:
    header = {}
    links = []
    speeds = {}
    svc_speeds = {}
    lines = text.splitlines()
    if not lines or not lines[0].startswith("TDARC"):
        raise ParseError("missing TDARC signature", 1)
    duration = None
    for no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "END":
            break
        tok = line.split()
        key = tok[0]
        if key in ("NAME",):
            header["NAME"] = tok[1] if len(tok) > 1 else ""
        elif key in ("VERTICES", "EDGES", "ARCS", "REQUIRED_EDGES",
                     "REQUIRED_ARCS", "VEHICLES"):
            header[key] = int(_num(tok[1], no))
        elif key == "CAPACITY":
            header[key] = _num(tok[1], no)
        elif key == "DURATION_LIMIT":
            duration = INF if tok[1] == "INF" else _num(tok[1], no)
        elif key in ("E", "A"):
            if len(tok) != 6:
                raise ParseError("link line needs: E|A id u v dist demand", no)
            lid = int(_num(tok[1], no))
            if lid != len(links):
                raise ParseError(f"link ids must appear in order, expected {len(links)}", no)
            links.append(Link(lid, key, int(_num(tok[2], no)), int(_num(tok[3], no)),
                              _num(tok[4], no), _num(tok[5], no)))
        elif key in ("SPEED", "SVC"):
            if len(tok) < 4:
                raise ParseError("speed line needs: SPEED id dir h bp... speeds...", no)
            lid = int(_num(tok[1], no))
            d = int(_num(tok[2], no))
            h = int(_num(tok[3], no))
            vals = [_num(t, no) for t in tok[4:]]
            if len(vals) != 2 * h - 1:
                raise ParseError(f"expected {h - 1} breakpoints and {h} speeds", no)
            if duration is None:
                raise ParseError("DURATION_LIMIT must precede SPEED lines", no)
            fn = SpeedFunction(vals[: h - 1], vals[h - 1:], duration)
            (speeds if key == "SPEED" else svc_speeds)[(lid, d)] = fn
        else:
            raise ParseError(f"unknown keyword {key!r}", no)
    for want in ("VERTICES", "VEHICLES", "CAPACITY"):
        if want not in header:
            raise ParseError(f"missing header {want}")
    if duration is None:
        raise ParseError("missing header DURATION_LIMIT")
    counts = {
        "EDGES": sum(1 for l in links if l.kind == "E"),
        "ARCS": sum(1 for l in links if l.kind == "A"),
        "REQUIRED_EDGES": sum(1 for l in links if l.kind == "E" and l.required),
        "REQUIRED_ARCS": sum(1 for l in links if l.kind == "A" and l.required),
    }
    for key, got in counts.items():
        if key in header and header[key] != got:
            raise ParseError(f"header {key}={header[key]} but file carries {got}")
    if speeds and not svc_speeds:
        # service profile defaults to 70% of the travel speed
        svc_speeds = {
            k: SpeedFunction(v.breakpoints,
                             tuple(s * SERVICE_SPEED_FACTOR for s in v.speeds),
                             v.horizon)
            for k, v in speeds.items()
        }
    links, capacity = _rescale_integral_demands(links, header["CAPACITY"])
    return Instance(header.get("NAME", "unnamed"), header["VERTICES"], links,
                    header["VEHICLES"], capacity, duration,
                    speeds, svc_speeds)


_CLASSIC_ALIASES = {
    "NAME": "NAME", "NOMBRE": "NAME",
    "VERTICES": "VERTICES",
    "DEPOT": "DEPOT", "DEPOSITO": "DEPOT",
    "VEHICLES": "VEHICLES", "VEHICULOS": "VEHICLES",
    "CAPACITY": "CAPACITY", "CAPACIDAD": "CAPACITY",
}


def _parse_classic(text: str) -> Instance:
    """Reader for the common CARP benchmark layouts (gdb / bccm / egl style).

    Accepts `KEY : value` headers (English or Spanish keywords), a numeric
    edge table `u v cost demand` (or `( u, v ) coste c demanda q` rows), and
    an optional ARCS section for oriented required links.
    """
    header = {}
    edges = []
    arcs = []
    target = edges
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.upper() in ("END", "FIN"):
            continue
        up = line.upper()
        if up.startswith(("LISTA_ARCOS", "ARCS", "REQUIRED ARCS")):
            target = arcs
            continue
        if up.startswith(("LISTA_ARISTAS", "EDGES")):
            target = edges
            continue
        if "(" in line:
            # ( u, v ) coste c [demanda q]
            try:
                inner = line[line.index("(") + 1: line.index(")")]
                u, v = (int(t.strip()) for t in inner.split(","))
                rest = [t for t in line[line.index(")") + 1:].replace(",", " ").split()]
                nums = [float(t) for t in rest if _is_number(t)]
            except Exception:
                raise ParseError("malformed parenthesised edge row", no)
            if not nums:
                raise ParseError("edge row missing cost", no)
            cost = nums[0]
            demand = nums[1] if len(nums) > 1 else 0.0
            target.append((u, v, cost, demand, no))
            continue
        if ":" in line:
            key, _, val = line.partition(":")
            key = key.strip().upper().replace("-", " ")
            val = val.strip()
            canon = _CLASSIC_ALIASES.get(key.split()[0] if key else "", None)
            if canon == "NAME":
                header["NAME"] = val.split()[0] if val else "unnamed"
            elif canon in ("VERTICES", "DEPOT", "VEHICLES"):
                header[canon] = int(float(val.split()[0]))
            elif canon == "CAPACITY":
                header["CAPACITY"] = float(val.split()[0])
            # anything else (costs totals, comments) is ignored
            continue
        toks = line.replace(",", " ").split()
        if all(_is_number(t) for t in toks) and len(toks) in (3, 4):
            u, v = int(float(toks[0])), int(float(toks[1]))
            cost = float(toks[2])
            demand = float(toks[3]) if len(toks) == 4 else 0.0
            target.append((u, v, cost, demand, no))
        # header banners like "NODES COST DEMAND" fall through silently
    for want in ("VERTICES", "CAPACITY"):
        if want not in header:
            raise ParseError(f"missing header {want}")
    depot = header.get("DEPOT", 1)
    n = header["VERTICES"]
    if not (1 <= depot <= n):
        raise ParseError(f"depot {depot} outside 1..{n}")
    # remap 1-indexed vertices so the depot becomes 0
    order = [depot] + [v for v in range(1, n + 1) if v != depot]
    remap = {old: new for new, old in enumerate(order)}
    links = []
    for kind, rows in (("E", edges), ("A", arcs)):
        for (u, v, cost, demand, no) in rows:
            if not (1 <= u <= n and 1 <= v <= n):
                raise ParseError(f"vertex outside 1..{n}", no)
            if cost <= 0:
                raise ParseError("edge cost must be positive", no)
            links.append(Link(len(links), kind, remap[u], remap[v], cost, demand))
    vehicles = header.get("VEHICLES", max(1, sum(1 for l in links if l.required)))
    links, capacity = _rescale_integral_demands(links, header["CAPACITY"])
    return Instance(header.get("NAME", "unnamed"), n, links, vehicles,
                    capacity, INF)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


# ------------------------------------------------------------- serialization


def _fmt(x: float) -> str:
    if x == INF:
        return "INF"
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def serialize_instance(inst: Instance) -> str:
    """td_native text form; parse_instance(..., 'td_native') round-trips it."""
    out = ["TDARC 1"]
    out.append(f"NAME {inst.name}")
    out.append(f"VERTICES {inst.num_vertices}")
    out.append(f"EDGES {sum(1 for l in inst.links if l.kind == 'E')}")
    out.append(f"ARCS {sum(1 for l in inst.links if l.kind == 'A')}")
    out.append(f"REQUIRED_EDGES {sum(1 for l in inst.links if l.kind == 'E' and l.required)}")
    out.append(f"REQUIRED_ARCS {sum(1 for l in inst.links if l.kind == 'A' and l.required)}")
    out.append(f"VEHICLES {inst.vehicles}")
    out.append(f"CAPACITY {_fmt(inst.capacity)}")
    out.append(f"DURATION_LIMIT {_fmt(inst.duration_limit)}")
    for l in inst.links:
        out.append(f"{l.kind} {l.id} {l.u} {l.v} {_fmt(l.dist)} {_fmt(l.demand)}")
    for label, table in (("SPEED", inst.travel_speeds), ("SVC", inst.service_speeds)):
        for (lid, d) in sorted(table):
            fn = table[(lid, d)]
            parts = [label, str(lid), str(d), str(fn.piece_count)]
            parts += [_fmt(b) for b in fn.breakpoints]
            parts += [_fmt(s) for s in fn.speeds]
            out.append(" ".join(parts))
    out.append("END")
    return "\n".join(out) + "\n"


# -------------------------------------------------------------- generation


def _static_shortest_paths(inst: Instance, weights=None):
    """All-pairs shortest distances over the traversal graph (uniform speed)."""
    rows, cols, data = [], [], []
    for l in inst.links:
        w = weights(l) if weights else l.dist
        rows.append(l.u)
        cols.append(l.v)
        data.append(w)
        if l.kind == "E":
            rows.append(l.v)
            cols.append(l.u)
            data.append(w)
    g = csr_matrix((data, (rows, cols)), shape=(inst.num_vertices, inst.num_vertices))
    return dijkstra(g, directed=True)

def _greedy_uniform_duration(inst: Instance) -> float:
    """Longest route duration of a greedy uniform-speed solution.

    Travel at speed 1, service at speed 0.7; nearest-feasible-service
    insertion under the capacity; used only to size the duration limit of
    generated instances.
    """
    dist = _static_shortest_paths(inst)
    pending = list(inst.required_ids)
    longest = 0.0
    while pending:
        load = 0.0
        t = 0.0
        cur = 0
        while True:
            best = None
            for lid in pending:
                l = inst.link(lid)
                if load + l.demand > inst.capacity:
                    continue
                for mode in inst.modes(lid):
                    s, e = inst.oriented_endpoints(lid, mode)
                    reach = dist[cur][s]
                    if not math.isfinite(reach):
                        continue
                    cost = reach + l.dist / SERVICE_SPEED_FACTOR
                    if best is None or cost < best[0] - 1e-12:
                        best = (cost, lid, e)
            if best is None:
                break
            cost, lid, end = best
            t += cost
            load += inst.link(lid).demand
            cur = end
            pending.remove(lid)
        t += dist[cur][0] if math.isfinite(dist[cur][0]) else 0.0
        longest = max(longest, t)
        if load == 0.0 and pending:
            raise InvariantViolation("capacity admits no service at all")
    return longest


def default_duration_limit(inst: Instance) -> float:
    """Twice the longest route of a greedy uniform-speed solution."""
    return 2.0 * _greedy_uniform_duration(inst)


def _link_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def generate_speed_profiles(inst: Instance, level: str, seed: int,
                            duration_limit=None) -> Instance:
    """New instance with random speed profiles at the given dependency level.

    Each oriented link gets six distinct breakpoints drawn from the grid
    {0.05 D, ..., 0.95 D} and seven segment speeds drawn uniformly from the
    level's bounds; the service profile is 70% of the travel profile.
    Deterministic per (instance, level, seed).
    """
    if level not in SPEED_BOUNDS:
        raise ValueError(f"level must be one of {sorted(SPEED_BOUNDS)}")
    if duration_limit is not None:
        D = float(duration_limit)
    elif math.isfinite(inst.duration_limit):
        D = inst.duration_limit
    else:
        D = default_duration_limit(inst)
    if not D > 0:
        raise InvariantViolation("resolved duration limit must be positive")
    grid = [0.05 * D * k for k in range(1, BREAKPOINT_GRID_STEPS + 1)]
    bounds = SPEED_BOUNDS[level]
    travel = {}
    service = {}
    for l in inst.links:
        for (d, _, _) in inst.directions(l):
            rng = _link_rng(seed, l.id, d)
            picks = np.sort(rng.choice(BREAKPOINT_GRID_STEPS, size=BREAKPOINTS_PER_LINK,
                                       replace=False))
            bps = [grid[i] for i in picks]
            speeds = [float(rng.uniform(a, b)) for (a, b) in bounds]
            travel[(l.id, d)] = SpeedFunction(bps, speeds, D)
            service[(l.id, d)] = SpeedFunction(
                bps, [s * SERVICE_SPEED_FACTOR for s in speeds], D)
    out = Instance(inst.name, inst.num_vertices, inst.links, inst.vehicles,
                   inst.capacity, D, travel, service)
    return out.validate()


def perturb_scenario(inst: Instance, spec: ScenarioSpec):
    """Scenario instances with every speed piece scaled by an independent
    truncated-normal factor (center 1, std sigma, truncated to [1-s, 1+s]);
    the same factor applies to the matching travel and service piece."""
    if not inst.has_profiles:
        raise InvariantViolation("perturbation requires speed profiles")
    out = []
    for s in range(spec.count):
        travel = {}
        service = {}
        for key in sorted(inst.travel_speeds):
            lid, d = key
            fn = inst.travel_speeds[key]
            rng = _link_rng(spec.seed, s, lid, d)
            factors = truncnorm.rvs(-1.0, 1.0, loc=1.0, scale=spec.sigma,
                                    size=fn.piece_count, random_state=rng)
            travel[key] = fn.scaled(factors)
            service[key] = inst.service_speeds[key].scaled(factors)
        scen = Instance(f"{inst.name}#s{s}", inst.num_vertices, inst.links,
                        inst.vehicles, inst.capacity, inst.duration_limit,
                        travel, service)
        out.append(scen.validate())
    return out


def uniform_speed_copy(inst: Instance, speed: float = None) -> Instance:
    """Time-independent copy: every link gets one constant travel speed.

    Default speed is the distance-weighted time-average of the nominal travel
    speeds (the static baseline used in scenario comparisons); the service
    speed keeps the 70% ratio.
    """
    if not math.isfinite(inst.duration_limit):
        raise InvariantViolation("uniform copy needs a finite duration limit")
    if speed is None:
        if not inst.has_profiles:
            speed = 1.0
        else:
            num = 0.0
            den = 0.0
            for (lid, d), fn in inst.travel_speeds.items():
                link = inst.link(lid)
                ts = list(fn.breakpoints) + [fn.horizon]
                t0 = 0.0
                avg = 0.0
                for bp, s in zip(ts, fn.speeds):
                    avg += s * (bp - t0)
                    t0 = bp
                avg /= fn.horizon
                num += link.dist * avg
                den += link.dist
            speed = num / den
    travel = {}
    service = {}
    for l in inst.links:
        for (d, _, _) in inst.directions(l):
            travel[(l.id, d)] = SpeedFunction([], [speed], inst.duration_limit)
            service[(l.id, d)] = SpeedFunction([], [speed * SERVICE_SPEED_FACTOR],
                                               inst.duration_limit)
    return Instance(f"{inst.name}-uniform", inst.num_vertices, inst.links,
                    inst.vehicles, inst.capacity, inst.duration_limit,
                    travel, service).validate()
