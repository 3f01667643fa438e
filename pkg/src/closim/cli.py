"""closim command line: run experiment sweeps, collision Monte Carlo,
contention verification and trace synthesis.

Config files are YAML; flags override file values. All output paths can
be redirected with the CLOSIM_OUTPUT_DIR environment variable.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import tempfile

import yaml

from . import routing, simulator
from .patterns import make_schedule, is_leafwise_permutation
from .routing import contiguous_view, source_route
from .simulator import run as sim_run
from .topology import ClusterConfig

SCHEMA_VERSION = 1


def _atomic_write(path: str, text: str):
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-closim-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _out_dir(configured: str | None) -> str:
    return os.environ.get("CLOSIM_OUTPUT_DIR") or configured or "."


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise SystemExit("config %s: %s" % (path, e))
    if not isinstance(cfg, dict):
        raise SystemExit("config %s: top level must be a mapping" % path)
    for key in ("cluster", "strategies", "seeds"):
        if key not in cfg:
            raise SystemExit("config %s: missing required field %r" % (path, key))
    return cfg


def _cluster_from(spec: dict) -> ClusterConfig:
    try:
        return ClusterConfig(
            leaves=spec["leaves"], spines=spec["spines"],
            gpus_per_server=spec["gpus_per_server"],
            links_per_pair=spec.get("links_per_pair", 1),
            ocs_count=spec.get("ocs_count", 0),
            ocs_rewire_delay=spec.get("ocs_rewire_delay", 0.05),
        )
    except KeyError as e:
        raise SystemExit("config field cluster: missing %s" % e)


def _load_trace(cfg: dict, lam: float, seed: int):
    if "trace" in cfg and isinstance(cfg["trace"], str):
        with open(cfg["trace"]) as fh:
            return [simulator.job_from_json_line(l) for l in fh if l.strip()]
    synth = cfg.get("synth", {})
    return simulator.synthesize_trace(
        count=synth.get("count", 1000), lambda_s=lam,
        seed=seed, mean_runtime_s=synth.get("mean_runtime_s", 4800.0))


def _run_cell(args):
    cfg, strategy, scheduler, lam, seed = args
    cluster = _cluster_from(cfg["cluster"])
    if strategy in ("ocs", "ocs_relax") and cluster.ocs_count == 0:
        cluster = ClusterConfig(
            cluster.leaves, cluster.spines, cluster.gpus_per_server,
            cluster.links_per_pair, 1, cluster.ocs_rewire_delay)
    trace = _load_trace(cfg, lam, seed)
    rep = sim_run(trace, cluster, strategy, scheduler, seed,
                  nic_gbps=cfg.get("nic_gbps", 100.0),
                  ilp_budget=cfg.get("ilp_budget", 10.0))
    return rep


def cmd_run(ns) -> int:
    cfg = load_config(ns.config)
    out = _out_dir(cfg.get("output_dir"))
    os.makedirs(out, exist_ok=True)
    strategies = cfg["strategies"]
    schedulers = cfg.get("schedulers", ["fifo"])
    lambdas = cfg.get("lambda_values", [120.0])
    seeds = cfg["seeds"]
    if not strategies or not seeds:
        raise SystemExit("config: strategies and seeds must be nonempty")
    cells = [(cfg, st, sc, lam, sd)
             for st in strategies for sc in schedulers
             for lam in lambdas for sd in seeds]
    workers = ns.workers or min(len(cells), os.cpu_count() or 1)
    failures = 0
    summaries = []
    if workers > 1 and len(cells) > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(_run_cell, cells))
    else:
        reports = [_run_cell(c) for c in cells]
    for (args, rep) in zip(cells, reports):
        _cfg, st, sc, lam, sd = args
        tag = "%s_%s_lam%g_seed%d" % (st, sc, lam, sd)
        rep.write_csv(os.path.join(out, "jobs_%s.csv" % tag))
        summary = rep.summary()
        summary["lambda"] = lam
        summary["schema_version"] = SCHEMA_VERSION
        _atomic_write(os.path.join(out, "summary_%s.json" % tag),
                      json.dumps(summary, sort_keys=True, indent=2) + "\n")
        summaries.append(summary)
        if summary["jobs_failed"] and not cfg.get("allow_failures", True):
            failures += 1
    table = _summary_table(summaries)
    _atomic_write(os.path.join(out, "summary_table.csv"), table)
    if ns.json:
        print(json.dumps(summaries, sort_keys=True))
    else:
        print(table, end="")
    return 1 if failures else 0


def _summary_table(summaries: list[dict]) -> str:
    lines = ["strategy,scheduler,lambda,seed,avg_jct,avg_jrt,avg_jwt,"
             "stability,frag_gpu,frag_network"]
    for s in sorted(summaries, key=lambda s: (s["strategy"], s["scheduler"],
                                              s["lambda"], s["seed"])):
        lines.append("%s,%s,%g,%d,%.3f,%.3f,%.3f,%.3f,%d,%d" % (
            s["strategy"], s["scheduler"], s["lambda"], s["seed"],
            s["avg_jct"], s["avg_jrt"], s["avg_jwt"], s["stability"],
            s["fragmentation"]["gpu_caused"],
            s["fragmentation"]["network_caused"]))
    return "\n".join(lines) + "\n"


def cmd_collisions(ns) -> int:
    scales = [int(s) for s in ns.scales.split(",")]
    res = routing.collision_monte_carlo(scales, ns.trials, ns.seed)
    lines = ["scale,count,fraction"]
    for scale in scales:
        for count, frac in sorted(res[scale]["fractions"].items()):
            lines.append("%d,%d,%.6f" % (scale, count, frac))
    csv_text = "\n".join(lines) + "\n"
    if ns.output:
        _atomic_write(os.path.join(_out_dir(None), ns.output), csv_text)
    if ns.json:
        print(json.dumps({str(k): v for k, v in res.items()}, sort_keys=True))
    else:
        print(csv_text, end="")
        for scale in scales:
            print("# P(contention) at %d GPUs: %.4f"
                  % (scale, res[scale]["p_contention"]))
    return 0


def cmd_verify(ns) -> int:
    """Exhaustive contention check of a collective under source routing."""
    n, leaves = ns.n, ns.leaves
    if n % leaves != 0:
        raise SystemExit("N must be divisible by the leaf count")
    per_leaf = n // leaves
    view = contiguous_view(n, per_leaf)
    sched = make_schedule(ns.collective, n, 1.0,
                          ranks_per_server=ns.ranks_per_server)
    leaf_map = {i: view.rank_leaf[i] for i in range(n)}
    worst = 0
    witness = None
    for st in sched.steps:
        ra = source_route(st, view)
        m = ra.max_contention()
        if m > worst:
            worst = m
            links = [k for k, v in ra.link_counts.items() if v == m]
            witness = (st.index, links[0] if links else None)
    ok = worst <= ns.max_contention
    leafwise = all(is_leafwise_permutation(st, leaf_map) for st in sched.steps)
    if ns.json:
        print(json.dumps({"collective": ns.collective, "n": n,
                          "leaves": leaves, "max_contention": worst,
                          "leafwise": leafwise, "pass": ok}, sort_keys=True))
    else:
        print("%s N=%d leaves=%d: max per-link contention %d (%s)"
              % (ns.collective, n, leaves, worst, "PASS" if ok else "FAIL"))
        if not ok and witness:
            print("  witness: step %d link %s" % witness)
    return 0 if ok else 1


def cmd_synth_trace(ns) -> int:
    jobs = simulator.synthesize_trace(ns.count, ns.lam, ns.seed)
    text = "\n".join(j.to_json_line() for j in jobs) + "\n"
    if ns.output:
        _atomic_write(ns.output, text)
        print("wrote %d jobs to %s" % (len(jobs), ns.output))
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="closim",
                                 description="Leaf-Spine GPU cluster simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="execute an experiment sweep")
    p.add_argument("config", help="YAML experiment config")
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("collisions", help="ECMP collision Monte Carlo")
    p.add_argument("--scales", default="64,256,1024,2048")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_collisions)

    p = sub.add_parser("verify", help="contention check under source routing")
    p.add_argument("collective")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--leaves", type=int, required=True)
    p.add_argument("--ranks-per-server", type=int, default=8)
    p.add_argument("--max-contention", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("synth-trace", help="generate a workload trace")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--lam", type=float, default=120.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None)
    p.set_defaults(fn=cmd_synth_trace)

    ns = ap.parse_args(argv)
    return ns.fn(ns)


if __name__ == "__main__":
    sys.exit(main())
