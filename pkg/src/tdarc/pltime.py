"""Piecewise-constant speed profiles and piecewise-linear arrival-time algebra.

A link carries a positive piecewise-constant speed profile.  Integrating the
profile turns a departure time into an arrival time; that map is continuous,
strictly increasing and piecewise linear, so it can be held in closed form as
a knot list and queried, inverted, composed and enveloped exactly.  Bucket
indexes over the planning horizon make point queries near O(1).

All objects here are immutable after construction and safe to share between
threads; the only mutable state is the optional QueryStats counter, which the
caller owns (use one per thread).
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right

import numpy as np

INF = math.inf

# Fraction of the horizon used as the absolute time tolerance everywhere.
REL_TOL = 1e-9
# Much finer tolerance used when dropping collinear knots, so simplification
# never eats into the REL_TOL accuracy budget.
MERGE_REL = 1e-12


class ArrivalBeyondHorizon(Exception):
    """The distance cannot be covered before the hard time cap."""


class DepartureBeforeZero(Exception):
    """The requested arrival is unreachable even when departing at time 0."""


class DegenerateHorizon(Exception):
    """No departure time allows finishing the traversal within the horizon."""


class QueryOutOfDomain(Exception):
    """Evaluation time lies outside the function's domain."""


def tolerance(horizon: float) -> float:
    """Absolute comparison tolerance for a given planning horizon."""
    return REL_TOL * horizon


class QueryStats:
    """Counters for bucket-indexed queries (direct piece hits vs binary searches)."""

    __slots__ = ("direct_hits", "binary_searches")

    def __init__(self):
        self.direct_hits = 0
        self.binary_searches = 0

    @property
    def total(self) -> int:
        return self.direct_hits + self.binary_searches

    @property
    def direct_rate(self) -> float:
        return self.direct_hits / self.total if self.total else 0.0

    def merge(self, other: "QueryStats") -> None:
        self.direct_hits += other.direct_hits
        self.binary_searches += other.binary_searches


class SpeedFunction:
    """Positive piecewise-constant speed on one oriented link.

    Piece i applies on [breakpoints[i-1], breakpoints[i]); the last piece
    extends indefinitely past the horizon (queries are capped elsewhere at
    twice the horizon).
    """

    __slots__ = ("breakpoints", "speeds", "horizon")

    def __init__(self, breakpoints, speeds, horizon):
        breakpoints = tuple(float(b) for b in breakpoints)
        speeds = tuple(float(s) for s in speeds)
        horizon = float(horizon)
        if not horizon > 0:
            raise ValueError("horizon must be positive")
        if len(speeds) != len(breakpoints) + 1:
            raise ValueError("piece count must be breakpoint count + 1")
        for a, b in zip(breakpoints, breakpoints[1:]):
            if not a < b:
                raise ValueError("breakpoints must be strictly increasing")
        if breakpoints and not (0.0 < breakpoints[0] and breakpoints[-1] < horizon):
            raise ValueError("breakpoints must lie strictly inside (0, horizon)")
        for s in speeds:
            if not (s > 0.0 and math.isfinite(s)):
                raise ValueError("speeds must be positive and finite")
        self.breakpoints = breakpoints
        self.speeds = speeds
        self.horizon = horizon

    @property
    def piece_count(self) -> int:
        return len(self.speeds)

    def speed_right(self, t: float) -> float:
        """Speed just after time t (right-continuous lookup)."""
        return self.speeds[bisect_right(self.breakpoints, t)]

    def speed_left(self, t: float) -> float:
        """Speed just before time t."""
        return self.speeds[bisect_left(self.breakpoints, t)]

    def max_speed(self) -> float:
        return max(self.speeds)

    def scaled(self, factors) -> "SpeedFunction":
        """New profile with piece i multiplied by factors[i]."""
        if len(factors) != len(self.speeds):
            raise ValueError("one factor per piece required")
        return SpeedFunction(
            self.breakpoints,
            tuple(s * f for s, f in zip(self.speeds, factors)),
            self.horizon,
        )

    def __eq__(self, other):
        return (
            isinstance(other, SpeedFunction)
            and self.breakpoints == other.breakpoints
            and self.speeds == other.speeds
            and self.horizon == other.horizon
        )

    def __hash__(self):
        return hash((self.breakpoints, self.speeds, self.horizon))

    def __repr__(self):
        return f"SpeedFunction({len(self.speeds)} pieces, horizon={self.horizon:g})"


def arrival_query_iterative(v: SpeedFunction, d: float, t_dep: float, cap=None) -> float:
    """Arrival time when leaving at t_dep and covering distance d on profile v.

    Linear scan over the speed pieces; O(piece count) worst case.
    """
    if d <= 0:
        raise ValueError("distance must be positive")
    if t_dep < 0:
        raise ValueError("departure must be nonnegative")
    if cap is None:
        cap = 2.0 * v.horizon
    bps = v.breakpoints
    speeds = v.speeds
    t = t_dep
    rem = d
    k = bisect_right(bps, t)
    while True:
        s = speeds[k]
        arr = t + rem / s
        if k >= len(bps) or arr <= bps[k]:
            if arr > cap:
                raise ArrivalBeyondHorizon(f"arrival {arr:g} beyond cap {cap:g}")
            return arr
        rem -= s * (bps[k] - t)
        t = bps[k]
        if t > cap:
            raise ArrivalBeyondHorizon(f"scan passed cap {cap:g}")
        k += 1


def departure_query_iterative(v: SpeedFunction, d: float, t_arr: float, eps=None) -> float:
    """Latest departure that arrives exactly at t_arr after distance d on v."""
    if d <= 0:
        raise ValueError("distance must be positive")
    if t_arr <= 0:
        raise ValueError("arrival must be positive")
    if eps is None:
        eps = tolerance(v.horizon)
    bps = v.breakpoints
    speeds = v.speeds
    t = t_arr
    rem = d
    k = bisect_left(bps, t_arr) - 1
    while True:
        s = speeds[k + 1]
        dep = t - rem / s
        if k < 0 or dep >= bps[k]:
            if dep < -eps:
                raise DepartureBeforeZero(
                    f"arrival {t_arr:g} unreachable even from time 0"
                )
            return max(dep, 0.0)
        rem -= s * (t - bps[k])
        t = bps[k]
        k -= 1


class ArrivalFunction:
    """Continuous, strictly increasing piecewise-linear departure -> arrival map.

    Stored as knot arrays (x, y); linear between consecutive knots.  An empty
    knot set is the everywhere-infeasible function (see INFEASIBLE).
    """

    __slots__ = ("x", "y", "_xl", "_yl")

    def __init__(self, x, y, validate=True):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("knot arrays must be matching 1-d arrays")
        if validate and x.size:
            if x.size < 2:
                raise ValueError("need at least two knots")
            if not np.all(np.diff(x) > 0):
                raise ValueError("knot times must be strictly increasing")
            if not np.all(np.diff(y) > 0):
                raise ValueError("knot values must be strictly increasing")
        self.x = x
        self.y = y
        self._xl = x.tolist()
        self._yl = y.tolist()

    # -- structure ---------------------------------------------------------

    @property
    def is_infeasible(self) -> bool:
        return self.x.size == 0

    @property
    def piece_count(self) -> int:
        return max(0, self.x.size - 1)

    @property
    def domain_start(self) -> float:
        return self._xl[0]

    @property
    def domain_end(self) -> float:
        return self._xl[-1]

    def knots(self):
        """[t, value] pairs (JSON-friendly serialization for debug dumps)."""
        return [[float(a), float(b)] for a, b in zip(self.x, self.y)]

    # -- evaluation --------------------------------------------------------

    def piece_index(self, t: float) -> int:
        """Index of the piece containing t; boundary ties go to the earlier piece."""
        i = bisect_left(self._xl, t) - 1
        if i < 0:
            return 0
        last = len(self._xl) - 2
        return last if i > last else i

    def _eval_piece(self, i: int, t: float) -> float:
        x0 = self._xl[i]
        x1 = self._xl[i + 1]
        y0 = self._yl[i]
        y1 = self._yl[i + 1]
        return y0 + (y1 - y0) * (t - x0) / (x1 - x0)

    def value(self, t: float, eps: float = 0.0) -> float:
        """f(t); raises QueryOutOfDomain outside the domain (with slack eps)."""
        if self.is_infeasible:
            raise QueryOutOfDomain("function is everywhere infeasible")
        if t < self._xl[0] - eps or t > self._xl[-1] + eps:
            raise QueryOutOfDomain(
                f"t={t:g} outside [{self._xl[0]:g}, {self._xl[-1]:g}]"
            )
        t = min(max(t, self._xl[0]), self._xl[-1])
        return self._eval_piece(self.piece_index(t), t)

    def value_or_inf(self, t: float) -> float:
        """f(t), or +inf outside the domain."""
        if self.is_infeasible or t < self._xl[0] or t > self._xl[-1]:
            return INF
        return self._eval_piece(self.piece_index(t), t)

    def value_extended(self, t: float) -> float:
        """f(t) extended linearly past the domain.

        The right extension uses slope max(final slope, 1), which preserves
        monotonicity and keeps f(t) - t nondecreasing past the domain end, so
        min-gap based lower bounds stay valid for penalized evaluations of
        horizon-violating routes.
        """
        if self.is_infeasible:
            return INF
        xl = self._xl
        if t > xl[-1]:
            i = len(xl) - 2
            slope = (self._yl[-1] - self._yl[-2]) / (xl[-1] - xl[-2])
            return self._yl[-1] + max(slope, 1.0) * (t - xl[-1])
        if t < xl[0]:
            slope = (self._yl[1] - self._yl[0]) / (xl[1] - xl[0])
            return self._yl[0] - slope * (xl[0] - t)
        return self._eval_piece(self.piece_index(t), t)

    def values(self, ts) -> np.ndarray:
        """Vectorized value_or_inf."""
        ts = np.asarray(ts, dtype=float)
        if self.is_infeasible:
            return np.full(ts.shape, INF)
        out = np.interp(ts, self.x, self.y)
        out[(ts < self.x[0]) | (ts > self.x[-1])] = INF
        return out

    def inverse_value(self, u: float) -> float:
        """t such that f(t) = u (f is strictly increasing)."""
        if self.is_infeasible or u < self._yl[0] or u > self._yl[-1]:
            raise QueryOutOfDomain(f"value {u:g} outside function range")
        return float(np.interp(u, self.y, self.x))

    def min_gap(self) -> float:
        """min over the domain of f(t) - t; attained at a knot since f is PL."""
        if self.is_infeasible:
            return INF
        return float(np.min(self.y - self.x))

    def __eq__(self, other):
        return (
            isinstance(other, ArrivalFunction)
            and self.x.shape == other.x.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )

    def __repr__(self):
        if self.is_infeasible:
            return "ArrivalFunction(infeasible)"
        return (
            f"ArrivalFunction({self.piece_count} pieces on "
            f"[{self.domain_start:g}, {self.domain_end:g}])"
        )


INFEASIBLE = ArrivalFunction([], [])


def identity(horizon: float) -> ArrivalFunction:
    """The identity map on [0, horizon] (zero-length displacement)."""
    return ArrivalFunction([0.0, horizon], [0.0, horizon])


def _simplify(xs, ys, eps_x: float, merge_tol: float) -> ArrivalFunction:
    """Build an ArrivalFunction from raw points: dedupe near-equal knot times
    (keep the first) and drop interior knots collinear within merge_tol."""
    kept_x = [xs[0]]
    kept_y = [ys[0]]
    for xx, yy in zip(xs[1:], ys[1:]):
        if xx - kept_x[-1] <= eps_x:
            continue
        kept_x.append(xx)
        kept_y.append(yy)
    if len(kept_x) < 2:
        # Degenerate sliver domain: widen with the final raw point if distinct.
        if xs[-1] - kept_x[-1] > 0:
            kept_x.append(xs[-1])
            kept_y.append(ys[-1])
        else:
            return INFEASIBLE
    out_x = [kept_x[0]]
    out_y = [kept_y[0]]
    for i in range(1, len(kept_x) - 1):
        x0, y0 = out_x[-1], out_y[-1]
        x1, y1 = kept_x[i], kept_y[i]
        x2, y2 = kept_x[i + 1], kept_y[i + 1]
        interp = y0 + (y2 - y0) * (x1 - x0) / (x2 - x0)
        if abs(y1 - interp) <= merge_tol:
            continue
        out_x.append(x1)
        out_y.append(y1)
    out_x.append(kept_x[-1])
    out_y.append(kept_y[-1])
    return ArrivalFunction(out_x, out_y)


def build_arrival_function(v: SpeedFunction, d: float, horizon=None) -> ArrivalFunction:
    """Closed-form arrival map for covering distance d on profile v.

    Knot times are the speed breakpoints reachable before the latest
    admissible departure plus the departure-time preimages of the breakpoints
    hit en route, deduplicated; the domain ends where the arrival equals the
    horizon.  Piece count is at most 2(h-1)+1 for an h-piece profile.
    """
    if d <= 0:
        raise ValueError("distance must be positive")
    D = v.horizon if horizon is None else float(horizon)
    eps = tolerance(D)
    try:
        phi0 = arrival_query_iterative(v, d, 0.0, cap=INF)
    except ArrivalBeyondHorizon:  # pragma: no cover - cap is INF
        raise
    if phi0 > D:
        raise DegenerateHorizon(
            f"earliest traversal finishes at {phi0:g} > horizon {D:g}"
        )
    t_max = departure_query_iterative(v, d, D)
    if t_max <= eps:
        raise DegenerateHorizon("no usable departure window within the horizon")
    points = [(0.0, phi0)]
    for t in v.breakpoints:
        if t <= t_max:
            points.append((t, arrival_query_iterative(v, d, t, cap=INF)))
        if t >= phi0:
            points.append((departure_query_iterative(v, d, t), t))
    points.append((t_max, D))
    points.sort()
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    fn = _simplify(xs, ys, eps, MERGE_REL * max(D, 1.0))
    # Pin the exact domain end: dedupe may have kept an interior point instead.
    if abs(fn._xl[-1] - t_max) <= eps and (fn._xl[-1], fn._yl[-1]) != (t_max, D):
        x = fn.x.copy()
        y = fn.y.copy()
        x[-1] = t_max
        y[-1] = D
        fn = ArrivalFunction(x, y)
    return fn


def _check_pointwise(result, expected_fn, tag, scale):
    """Validate result at piece midpoints against a reference evaluator."""
    if result.is_infeasible or result.piece_count == 0:
        return
    mids = (result.x[:-1] + result.x[1:]) / 2.0
    got = result.values(mids)
    want = expected_fn(mids)
    bad = np.abs(got - want) > 1e-7 * scale
    if np.any(bad):
        raise ValueError(f"{tag}: piecewise-linear result deviates from pointwise oracle")


def lower_envelope(f: ArrivalFunction, g: ArrivalFunction, eps=None) -> ArrivalFunction:
    """Pointwise minimum of f and g (each +inf outside its domain).

    Crossing points become new knots.  Both inputs must cover a contiguous
    union interval (their domains must overlap or touch).
    """
    if f.is_infeasible:
        return g
    if g.is_infeasible:
        return f
    scale = max(f.domain_end, g.domain_end, 1.0)
    if eps is None:
        eps = REL_TOL * scale
    if f.domain_start > g.domain_end or g.domain_start > f.domain_end:
        raise ValueError("envelope inputs must have overlapping domains")
    cand = np.unique(np.concatenate([f.x, g.x]))
    fv = f.values(cand)
    gv = g.values(cand)
    with np.errstate(invalid="ignore"):
        diff = fv - gv
    d0 = diff[:-1]
    d1 = diff[1:]
    finite = np.isfinite(d0) & np.isfinite(d1)
    prod = np.zeros_like(d0)
    np.multiply(d0, d1, out=prod, where=finite)
    crossing = finite & (prod < 0)
    idx = np.nonzero(crossing)[0]
    if idx.size:
        tc = cand[idx] + (cand[idx + 1] - cand[idx]) * d0[idx] / (d0[idx] - d1[idx])
        cand = np.unique(np.concatenate([cand, tc]))
        fv = f.values(cand)
        gv = g.values(cand)
    vals = np.minimum(fv, gv)
    keep = np.isfinite(vals)
    if not np.all(keep):
        raise ValueError("envelope produced an infinite gap inside the union domain")
    out = _simplify(list(cand), list(vals), eps, MERGE_REL * scale)
    _check_pointwise(out, lambda ts: np.minimum(f.values(ts), g.values(ts)),
                     "lower_envelope", scale)
    return out


def compose(outer: ArrivalFunction, inner: ArrivalFunction, eps=None) -> ArrivalFunction:
    """outer(inner(t)); +inf where inner's value leaves outer's domain."""
    if outer.is_infeasible or inner.is_infeasible:
        return INFEASIBLE
    scale = max(outer.domain_end, inner.domain_end, 1.0)
    if eps is None:
        eps = REL_TOL * scale
    lo_val = max(inner._yl[0], outer._xl[0])
    hi_val = min(inner._yl[-1], outer._xl[-1])
    if hi_val - lo_val <= 0:
        return INFEASIBLE
    t_lo = inner.inverse_value(lo_val)
    t_hi = inner.inverse_value(hi_val)
    inner_knots = inner.x[(inner.x > t_lo) & (inner.x < t_hi)]
    outer_knots = outer.x[(outer.x > lo_val) & (outer.x < hi_val)]
    preimages = np.interp(outer_knots, inner.y, inner.x)
    cand = np.unique(np.concatenate([[t_lo, t_hi], inner_knots, preimages]))
    mapped = np.clip(np.interp(cand, inner.x, inner.y), outer._xl[0], outer._xl[-1])
    vals = np.interp(mapped, outer.x, outer.y)
    out = _simplify(list(cand), list(vals), eps, MERGE_REL * scale)

    def oracle(ts):
        m = inner.values(ts)
        res = np.full(ts.shape, INF)
        ok = np.isfinite(m) & (m >= outer.x[0] - 1e-9 * scale) & (m <= outer.x[-1] + 1e-9 * scale)
        res[ok] = outer.values(np.clip(m[ok], outer.x[0], outer.x[-1]))
        return res

    _check_pointwise(out, oracle, "compose", scale)
    return out


def functions_equal(f: ArrivalFunction, g: ArrivalFunction, eps: float) -> bool:
    """True when f and g agree within eps on the union of their knots."""
    if f.is_infeasible or g.is_infeasible:
        return f.is_infeasible and g.is_infeasible
    if abs(f.domain_start - g.domain_start) > eps or abs(f.domain_end - g.domain_end) > eps:
        return False
    ts = np.unique(np.concatenate([f.x, g.x]))
    lo = max(f.domain_start, g.domain_start)
    hi = min(f.domain_end, g.domain_end)
    ts = ts[(ts >= lo) & (ts <= hi)]
    if ts.size == 0:
        return True
    return bool(np.max(np.abs(f.values(ts) - g.values(ts))) <= eps)


class BucketIndex:
    """Uniform time buckets over the planning horizon, each pointing at the
    function piece containing its left boundary."""

    __slots__ = ("bucket_count", "horizon", "bucket_to_piece")

    def __init__(self, bucket_count: int, horizon: float, bucket_to_piece):
        self.bucket_count = int(bucket_count)
        self.horizon = float(horizon)
        self.bucket_to_piece = bucket_to_piece

    def __repr__(self):
        return f"BucketIndex(B={self.bucket_count}, horizon={self.horizon:g})"


def default_bucket_count(piece_count: int) -> int:
    """4x the indexed function's piece count, capped at 1024."""
    return max(1, min(1024, 4 * piece_count))


def build_bucket_index(f: ArrivalFunction, bucket_count=None, horizon=None) -> BucketIndex:
    """Index f's pieces on a uniform grid; boundary ties go to the earlier piece."""
    if f.is_infeasible:
        raise ValueError("cannot index an infeasible function")
    B = default_bucket_count(f.piece_count) if bucket_count is None else int(bucket_count)
    if B < 1:
        raise ValueError("bucket count must be >= 1")
    H = float(horizon) if horizon is not None else f.domain_end
    boundaries = np.arange(B + 1) * (H / B)
    idx = np.searchsorted(f.x, boundaries, side="left") - 1
    idx = np.clip(idx, 0, f.piece_count - 1)
    return BucketIndex(B, H, idx.astype(np.int32).tolist())


def bucket_query(f: ArrivalFunction, idx: BucketIndex, t: float,
                 stats: QueryStats | None = None, eps: float = 0.0) -> float:
    """f(t) via the bucket index.

    When the two bracketing buckets point at the same piece the evaluation is
    direct; otherwise a binary search runs between the pointed pieces.  The
    result is always identical to a full binary search.
    """
    if f.is_infeasible:
        raise QueryOutOfDomain("function is everywhere infeasible")
    if t < f._xl[0] - eps or t > f._xl[-1] + eps:
        raise QueryOutOfDomain(f"t={t:g} outside [{f._xl[0]:g}, {f._xl[-1]:g}]")
    t = min(max(t, f._xl[0]), f._xl[-1])
    width = idx.horizon / idx.bucket_count
    b0 = int(t / width)
    if b0 > idx.bucket_count:
        b0 = idx.bucket_count
    b1 = b0 if (b0 == idx.bucket_count or b0 * width == t) else b0 + 1
    btp = idx.bucket_to_piece
    p0 = btp[b0]
    p1 = btp[b1]
    if p0 == p1:
        if stats is not None:
            stats.direct_hits += 1
        piece = p0
    else:
        if stats is not None:
            stats.binary_searches += 1
        piece = bisect_left(f._xl, t, p0, p1 + 1) - 1
        if piece < p0:
            piece = p0
    return f._eval_piece(piece, t)


def min_gap(f: ArrivalFunction) -> float:
    """Minimum of f(t) - t over the domain (exact: scanned at the knots)."""
    return f.min_gap()
