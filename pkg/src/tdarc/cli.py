"""Command-line surface and experiment harness.

Subcommands: generate (speed profiles), preprocess (quickest-path cache +
report), solve (heuristic / exact / both), compare (fixed solutions under
perturbed speeds vs perfect-knowledge baselines), stats (filter and bucket
counters, with component toggles).

Exit codes: 0 success, 2 infeasibility, 1 error.  Scenario evaluations in
compare are independent of each other; the report aggregation is
order-independent.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass

from .bcp import run_bcp
from .hgs import HgsParams, decode_route, format_solution, run_hgs
from .network import (
    Instance,
    InvariantViolation,
    ParseError,
    ScenarioSpec,
    generate_speed_profiles,
    parse_instance,
    perturb_scenario,
    serialize_instance,
    uniform_speed_copy,
)
from .profiles import (
    build_profile_matrix,
    load_profile_cache,
    relevant_origins,
    save_profile_cache,
)
from .tables import ServiceTables

CACHE_ENV = "TDARC_CACHE_DIR"


@dataclass
class RunConfig:
    command: str
    instance: str = ""
    format: str = "td_native"
    level: str = "M"
    seed: int = 0
    time_limit: float | None = None
    buckets: int | None = None
    mu: float = 0.5
    sigma: float | None = None
    scenarios: int = 20
    engine: str = "both"
    out: str | None = None
    out_json: str | None = None
    duration_limit: float | None = None
    audit: bool = False
    no_filters: bool = False
    no_buckets: bool = False
    iters: int | None = None
    dump_functions: str | None = None

    def validate(self):
        if self.command == "compare" and self.sigma is None:
            raise ValueError("compare requires --sigma")
        if self.command in ("preprocess", "solve", "compare", "stats",
                            "generate") and not self.instance:
            raise ValueError(f"{self.command} requires --instance")
        return self


def _load_instance(cfg: RunConfig) -> Instance:
    with open(cfg.instance, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_instance(text, cfg.format)


def _cache_path(inst: Instance, buckets) -> str | None:
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    os.makedirs(root, exist_ok=True)
    tag = f"{inst.content_hash()}-b{buckets or 'auto'}"
    return os.path.join(root, f"profiles-{tag}.npz")


def _profiles(inst: Instance, cfg: RunConfig, collect_stats=False):
    path = _cache_path(inst, cfg.buckets)
    if path and os.path.exists(path):
        try:
            return load_profile_cache(inst, path, cfg.buckets, collect_stats)
        except ValueError:
            pass
    pm = build_profile_matrix(inst, cfg.buckets, collect_stats)
    if path:
        save_profile_cache(pm, path)
    return pm


def _write(path, text):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _emit_json(cfg, payload):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if cfg.out_json:
        with open(cfg.out_json, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _hgs_params(cfg: RunConfig) -> HgsParams:
    params = HgsParams()
    params.audit = cfg.audit
    params.use_filters = not cfg.no_filters
    if cfg.iters is not None:
        params.max_iters = cfg.iters
        params.max_no_improve = max(1, cfg.iters)
    return params


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig) -> int:
    inst = _load_instance(cfg)
    gen = generate_speed_profiles(inst, cfg.level, cfg.seed, cfg.duration_limit)
    _write(cfg.out, serialize_instance(gen))
    return 0


def cmd_preprocess(cfg: RunConfig) -> int:
    inst = _load_instance(cfg)
    t0 = time.perf_counter()
    pm = _profiles(inst, cfg)
    wall = time.perf_counter() - t0
    report = {
        "instance": inst.name,
        "vertices": inst.num_vertices,
        "origins": len(relevant_origins(inst)),
        "functions": len(pm.psi),
        "mean_pieces": round(pm.mean_pieces, 3),
        "total_pieces": pm.total_pieces,
        "build_seconds": round(pm.build_seconds, 4),
        "wall_seconds": round(wall, 4),
    }
    if cfg.dump_functions:
        dump = {f"{o}->{v}": fn.knots() for (o, v), fn in sorted(pm.psi.items())
                if not fn.is_infeasible}
        with open(cfg.dump_functions, "w", encoding="utf-8") as fh:
            json.dump(dump, fh)
    _emit_json(cfg, report)
    return 0


def cmd_solve(cfg: RunConfig) -> int:
    inst = _load_instance(cfg)
    if not inst.has_profiles:
        raise InvariantViolation("solve needs an instance with speed profiles")
    pm = _profiles(inst, cfg, collect_stats=True)
    tb = ServiceTables(inst, pm)
    record = {"instance": inst.name, "engine": cfg.engine, "seed": cfg.seed}
    plan = None
    if cfg.engine in ("hgs", "both"):
        params = _hgs_params(cfg)
        plan, hstats = run_hgs(inst, pm, params, cfg.seed, cfg.time_limit,
                               tables=tb)
        record["hgs"] = {
            "objective": plan.total_duration,
            "feasible": plan.feasible,
            "iterations": hstats.iterations,
            "filter_rate": round(hstats.search.filter_rate, 4),
            "bucket_direct_rate": round(hstats.bucket_direct_rate, 4),
            "wall_seconds": round(hstats.wall_seconds, 3),
        }
    if cfg.engine in ("bcp", "both"):
        warm = plan.routes if plan is not None else None
        ub = plan.total_duration if (plan is not None and plan.feasible) else math.inf
        res = run_bcp(inst, pm, initial_upper_bound=ub, warm_routes=warm,
                      time_limit=cfg.time_limit, tables=tb)
        record["bcp"] = res.record()
        record["gap_percent"] = res.gap_percent
        if res.best_plan is not None:
            plan = res.best_plan
    if plan is None:
        return 2
    record["objective"] = plan.total_duration
    stats = record.get("hgs", {})
    _write(cfg.out, format_solution(plan, stats))
    _emit_json(cfg, record)
    return 0 if plan.feasible else 2


def _evaluate_fixed(plan_routes, scen_tables) -> float:
    """Re-decode fixed service sequences under scenario speeds (modes and
    timings re-optimized, assignment and order kept)."""
    total = 0.0
    tb = scen_tables
    for route in plan_routes:
        seq = [tb.index_of[lid] for lid in route]
        total += decode_route(tb, seq, extended=True).duration
    return total


def run_compare(inst: Instance, sigma: float, scenarios: int, seed: int,
                params: HgsParams | None = None, time_limit=None,
                buckets=None) -> dict:
    """Scenario harness: fixed nominal-speed and uniform-speed solutions are
    re-decoded under each perturbed scenario and gauged against a
    perfect-knowledge solve of that scenario."""
    params = params or HgsParams()
    pm = build_profile_matrix(inst, buckets)
    td_plan, _ = run_hgs(inst, pm, params, seed, time_limit)

    static = uniform_speed_copy(inst)
    pm_static = build_profile_matrix(static, buckets)
    carp_plan, _ = run_hgs(static, pm_static, params, seed, time_limit)

    spec = ScenarioSpec(sigma=sigma, seed=seed, count=scenarios)
    rows = []
    for i, scen in enumerate(perturb_scenario(inst, spec)):
        scen_pm = build_profile_matrix(scen, buckets)
        scen_tb = ServiceTables(scen, scen_pm)
        base_plan, _ = run_hgs(scen, scen_pm, params, seed, time_limit)
        baseline = base_plan.total_duration
        td_val = _evaluate_fixed(td_plan.routes, scen_tb)
        carp_val = _evaluate_fixed(carp_plan.routes, scen_tb)
        rows.append({
            "scenario": i,
            "baseline": baseline,
            "td_value": td_val,
            "carp_value": carp_val,
            "td_gap_percent": 100.0 * (td_val - baseline) / baseline,
            "carp_gap_percent": 100.0 * (carp_val - baseline) / baseline,
        })
    td_mean = sum(r["td_gap_percent"] for r in rows) / len(rows)
    carp_mean = sum(r["carp_gap_percent"] for r in rows) / len(rows)
    return {
        "instance": inst.name,
        "sigma": sigma,
        "scenarios": scenarios,
        "td_mean_gap_percent": td_mean,
        "carp_mean_gap_percent": carp_mean,
        "td_advantage_percent": carp_mean - td_mean,
        "rows": rows,
    }


def cmd_compare(cfg: RunConfig) -> int:
    inst = _load_instance(cfg)
    if not inst.has_profiles:
        raise InvariantViolation("compare needs an instance with speed profiles")
    report = run_compare(inst, cfg.sigma, cfg.scenarios, cfg.seed,
                         _hgs_params(cfg), cfg.time_limit, cfg.buckets)
    rows = report["rows"]
    if cfg.out:
        lines = ["scenario,baseline,td_value,carp_value,td_gap_percent,carp_gap_percent"]
        for r in rows:
            lines.append(f"{r['scenario']},{r['baseline']:.6f},{r['td_value']:.6f},"
                         f"{r['carp_value']:.6f},{r['td_gap_percent']:.4f},"
                         f"{r['carp_gap_percent']:.4f}")
        _write(cfg.out, "\n".join(lines) + "\n")
    _emit_json(cfg, report)
    return 0


def cmd_stats(cfg: RunConfig) -> int:
    inst = _load_instance(cfg)
    if not inst.has_profiles:
        raise InvariantViolation("stats needs an instance with speed profiles")
    variants = [
        ("full", True, True),
        ("no_filters", False, True),
        ("no_buckets", True, False),
        ("no_filters_no_buckets", False, False),
    ]
    rows = []
    for name, use_filters, use_buckets in variants:
        pm = build_profile_matrix(inst, cfg.buckets, collect_stats=True)
        pm.use_buckets = use_buckets
        params = _hgs_params(cfg)
        params.use_filters = use_filters and not cfg.no_filters
        params.audit = cfg.audit
        plan, hstats = run_hgs(inst, pm, params, cfg.seed, cfg.time_limit)
        rows.append({
            "variant": name,
            "objective": plan.total_duration,
            "filter_rate": hstats.search.filter_rate if params.use_filters else 0.0,
            "bucket_direct_rate": pm.stats.direct_rate if use_buckets else 0.0,
            "audit_checked": hstats.search.audit_checked,
            "audit_violations": hstats.search.audit_violations,
            "wall_seconds": hstats.wall_seconds,
        })
    header = ("variant,objective,filter_rate,bucket_direct_rate,"
              "audit_checked,audit_violations,wall_seconds")
    lines = [header]
    for r in rows:
        lines.append(f"{r['variant']},{r['objective']:.6f},{r['filter_rate']:.4f},"
                     f"{r['bucket_direct_rate']:.4f},{r['audit_checked']},"
                     f"{r['audit_violations']},{r['wall_seconds']:.3f}")
    _write(cfg.out, "\n".join(lines) + "\n")
    _emit_json(cfg, {"instance": inst.name, "rows": rows})
    return 0


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tdarc",
        description="Time-dependent capacitated arc routing toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, fmt_default="td_native"):
        sp.add_argument("--instance", required=True, help="instance file")
        sp.add_argument("--format", default=fmt_default,
                        choices=["td_native", "classic_carp"])
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--buckets", type=int, default=None,
                        help="bucket count per function (default: 4x pieces)")
        sp.add_argument("--out", default=None, help="primary output file")
        sp.add_argument("--out-json", default=None, help="JSON record file")

    g = sub.add_parser("generate", help="attach random speed profiles")
    common(g, fmt_default="classic_carp")
    g.add_argument("--level", default="M", choices=["L", "M", "H"])
    g.add_argument("--duration-limit", type=float, default=None)

    pre = sub.add_parser("preprocess", help="build quickest-path profiles")
    common(pre)
    pre.add_argument("--dump-functions", default=None,
                     help="write all profile knots as JSON")

    so = sub.add_parser("solve", help="run the heuristic and/or exact solver")
    common(so)
    so.add_argument("--engine", default="both", choices=["hgs", "bcp", "both"])
    so.add_argument("--time-limit", type=float, default=None)
    so.add_argument("--mu", type=float, default=0.5)
    so.add_argument("--iters", type=int, default=None,
                    help="cap on heuristic iterations")
    so.add_argument("--audit", action="store_true")

    cp = sub.add_parser("compare", help="evaluate fixed solutions under noise")
    common(cp)
    cp.add_argument("--sigma", type=float, required=True)
    cp.add_argument("--scenarios", type=int, default=20)
    cp.add_argument("--time-limit", type=float, default=None)
    cp.add_argument("--iters", type=int, default=None)

    st = sub.add_parser("stats", help="filter/bucket statistics and toggles")
    common(st)
    st.add_argument("--time-limit", type=float, default=None)
    st.add_argument("--iters", type=int, default=None)
    st.add_argument("--audit", action="store_true")
    st.add_argument("--no-filters", action="store_true")
    st.add_argument("--no-buckets", action="store_true")
    return p


def config_from_args(args) -> RunConfig:
    cfg = RunConfig(command=args.command)
    for name in ("instance", "format", "level", "seed", "time_limit", "buckets",
                 "mu", "sigma", "scenarios", "engine", "out", "out_json",
                 "duration_limit", "audit", "no_filters", "no_buckets", "iters",
                 "dump_functions"):
        if hasattr(args, name):
            setattr(cfg, name, getattr(args, name))
    return cfg.validate()


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "solve": cmd_solve,
    "compare": cmd_compare,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        return COMMANDS[cfg.command](cfg)
    except (ParseError, InvariantViolation, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
