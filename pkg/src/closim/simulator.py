"""Discrete-event cluster simulator.

Jobs arrive (Poisson), wait in a queue, get placed by the configured
strategy, run for `iterations` iterations and leave.  Communication time
is flow-level: reserved strategies (vClos, OCS-vClos) are isolated by
construction, while shared-fabric strategies (ECMP, Balanced, SR,
OCS-Relax) interact through a per-link flow-count overlay that is
re-evaluated whenever the set of running jobs changes.
"""

from __future__ import annotations

import csv
import functools
import heapq
import json
import math
import random
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import patterns, placement, routing
from .patterns import Algo, make_schedule
from .placement import JobRequest, NoFit, is_nofit
from .topology import ClusterConfig, PhysicalCluster, build_cluster

STRATEGIES = ("ecmp", "balanced", "sr", "vclos", "ocs", "best", "ocs_relax")
SCHEDULERS = ("fifo", "edf", "ff")

NIC_GBPS_DEFAULT = 100.0


@dataclass
class JobProfile:
    model_tag: str
    n_gpus: int
    iterations: int
    compute_time_per_iter: float
    comm_bytes_per_iter: float
    collective: str
    alpha: float
    batch_size: str = "default"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class Job:
    job_id: str
    arrival_time: float
    profile: JobProfile

    def to_json_line(self) -> str:
        p = self.profile
        return json.dumps({
            "job_id": self.job_id, "arrival_time": self.arrival_time,
            "N": p.n_gpus, "model_tag": p.model_tag,
            "collective": p.collective, "iterations": p.iterations,
            "compute_time_per_iter": p.compute_time_per_iter,
            "comm_bytes_per_iter": p.comm_bytes_per_iter,
            "alpha": p.alpha, "batch_size": p.batch_size,
        }, sort_keys=True)


def job_from_json_line(line: str) -> Job:
    d = json.loads(line)
    return Job(d["job_id"], d["arrival_time"], JobProfile(
        d["model_tag"], d["N"], d["iterations"], d["compute_time_per_iter"],
        d["comm_bytes_per_iter"], d["collective"], d["alpha"],
        d.get("batch_size", "default")))


# ------------------------------------------------------------- core formulas

def iteration_time(profile: JobProfile, comm_time_actual: float,
                   comm_time_ideal: float = 0.0) -> float:
    """Overlap model: the (1-alpha) share of communication can hide
    behind compute, the alpha share never does."""
    a = profile.alpha
    return max(profile.compute_time_per_iter,
               (1.0 - a) * comm_time_actual) + a * comm_time_actual


def max_min_share(flows: list[tuple[tuple, float]],
                  capacities: dict) -> list[float]:
    """Progressive-filling max-min fair rates for (path, demand) flows.

    A flow with an empty path is only limited by its demand.
    """
    n = len(flows)
    rates = [0.0] * n
    # pathless flows are limited only by their demand
    active = set()
    for i, (path, demand) in enumerate(flows):
        if path:
            active.add(i)
        else:
            rates[i] = demand
    cap = dict(capacities)
    while active:
        users: dict = {}
        for i in active:
            for link in flows[i][0]:
                users.setdefault(link, []).append(i)
        # uniform increment until a link saturates or a demand is met
        grow = min(cap[link] / len(idxs) for link, idxs in users.items())
        grow = min(grow, min(flows[i][1] - rates[i] for i in active))
        for i in active:
            rates[i] += grow
        for link, idxs in users.items():
            cap[link] -= grow * len(idxs)
        frozen = {i for i in active if rates[i] >= flows[i][1] - 1e-12}
        for link, idxs in users.items():
            if cap[link] <= 1e-9 * capacities.get(link, 1.0) + 1e-15:
                frozen.update(idxs)
        if not frozen:
            break
        active -= frozen
    return rates


def communication_time(schedule: patterns.CommSchedule,
                       routes_per_step: list[routing.RouteAssignment],
                       background: list[tuple[tuple, float]] | None = None,
                       capacity: float = NIC_GBPS_DEFAULT * 1e9 / 8) -> float:
    """Sum over steps of the slowest flow's finish time under max-min
    sharing against concurrent background flows."""
    background = background or []
    total = 0.0
    for st, ra in zip(schedule.steps, routes_per_step):
        flows = []
        sizes = []
        for f, path in ra.paths:
            if f.local:
                continue
            flows.append((path, capacity))
            sizes.append(f.nbytes)
        if not flows:
            continue
        caps: dict = {}
        for path, _d in flows + background:
            for link in path:
                caps[link] = capacity
        rates = max_min_share(flows + background, caps)
        total += max(
            (sz / r for sz, r in zip(sizes, rates[:len(sizes)]) if r > 0),
            default=0.0,
        )
    return total


# ------------------------------------------------------------ trace synthesis

# Helios-flavoured size mix: mostly small jobs, a thin tail of large ones.
DEFAULT_SIZES = (1, 2, 4, 8, 16, 32, 64, 96, 128)
DEFAULT_WEIGHTS = (30, 20, 15, 15, 8, 6, 3, 2, 1)

# (model_tag, collective, alpha, batch sizes); AlltoAll traffic never
# overlaps with compute, AllReduce mostly does
_ARCHETYPES = (
    ("vgg16", "ring", 0.15, ("32", "64")),
    ("resnet50", "ring", 0.15, ("64", "128")),
    ("bert", "hd", 0.15, ("16", "32")),
    ("gpt2", "hier_ring", 0.15, ("8", "16")),
    ("dlrm", "alltoall", 1.0, ("512", "1024")),
    ("moe", "alltoall", 1.0, ("64", "128")),
)


def synthesize_trace(count: int, lambda_s: float = 120.0, seed: int = 0,
                     sizes=DEFAULT_SIZES, weights=DEFAULT_WEIGHTS,
                     mean_runtime_s: float = 4800.0) -> list[Job]:
    """Poisson arrivals with the configured size mix; deterministic per
    seed."""
    if lambda_s <= 0:
        raise ValueError("lambda_s must be positive")
    rng = random.Random(seed)
    jobs = []
    t = 0.0
    for i in range(count):
        t += rng.expovariate(1.0 / lambda_s)
        n = rng.choices(sizes, weights=weights)[0]
        model, coll, alpha, batches = _ARCHETYPES[rng.randrange(len(_ARCHETYPES))]
        if n == 1:
            coll, alpha = "ring", 0.15  # single GPU: no collective traffic
        batch = batches[rng.randrange(len(batches))]
        compute = rng.uniform(0.03, 0.12)
        nbytes = rng.choice((100e6, 200e6, 400e6, 800e6))
        profile = JobProfile(model, n, 1, compute, nbytes, coll, alpha, batch)
        ideal = ideal_comm_time(profile)
        t_iter = iteration_time(profile, ideal, ideal)
        target = rng.expovariate(1.0 / mean_runtime_s) + 60.0
        iters = max(1, int(target / t_iter))
        profile.iterations = iters
        jobs.append(Job("j%05d" % i, t, profile))
    return jobs


@functools.lru_cache(maxsize=64)
def _cached_schedule(collective: str, n: int, data_bytes: float,
                     ranks_per_server: int):
    """Schedules are pure values; jobs share few distinct shapes, so
    caching avoids rebuilding the big ones."""
    return make_schedule(collective, n, data_bytes, ranks_per_server)


def ideal_comm_time(profile: JobProfile,
                    capacity: float = NIC_GBPS_DEFAULT * 1e9 / 8,
                    ranks_per_server: int = 8) -> float:
    """Contention-free fabric time of one iteration's schedule."""
    if profile.n_gpus < 2:
        return 0.0
    sched = _cached_schedule(profile.collective, profile.n_gpus,
                             profile.comm_bytes_per_iter, ranks_per_server)
    total = 0.0
    for st in sched.steps:
        sizes = [f.nbytes for f in st.flows if not f.local]
        if sizes:
            total += max(sizes) / capacity
    return total


def ideal_runtime(profile: JobProfile, **kw) -> float:
    ideal = ideal_comm_time(profile, **kw)
    return profile.iterations * iteration_time(profile, ideal, ideal)


# ------------------------------------------------------- fabric load profiles

class LoadProfile:
    """A placed job's static footprint on the shared fabric.

    ``w`` maps link index -> max concurrent flows the job ever puts on it
    (max over schedule steps).  The flow arrays let the job's per-step
    times be re-evaluated against any global link-load vector.
    """

    def __init__(self, step_base: np.ndarray, flow_bytes, flow_step,
                 link_ids, flow_starts, w: dict[int, int]):
        self.step_base = step_base
        self.flow_bytes = np.asarray(flow_bytes, dtype=float)
        self.flow_step = np.asarray(flow_step, dtype=np.int64)
        self.link_ids = np.asarray(link_ids, dtype=np.int64)
        self.flow_starts = np.asarray(flow_starts, dtype=np.int64)
        self.w = w

    def comm_time(self, loads: np.ndarray, capacity: float) -> float:
        if self.flow_bytes.size == 0:
            return float(self.step_base.sum())
        per_link = loads[self.link_ids]
        per_flow = np.maximum.reduceat(per_link, self.flow_starts)
        t_flow = self.flow_bytes * per_flow / capacity
        step_t = self.step_base.copy()
        np.maximum.at(step_t, self.flow_step, t_flow)
        return float(step_t.sum())


def _link_index(cfg: ClusterConfig, direction: int, leaf: int, spine: int) -> int:
    return direction * cfg.leaves * cfg.spines + leaf * cfg.spines + spine


def build_load_profile(job: Job, gpus: list[int], cfg: ClusterConfig,
                       strategy: str, seed: int, capacity: float,
                       global_loads: np.ndarray | None = None) -> LoadProfile:
    """Route the job's schedule on the physical fabric and summarize it."""
    n = job.profile.n_gpus
    sched = _cached_schedule(job.profile.collective, n,
                             job.profile.comm_bytes_per_iter,
                             cfg.gpus_per_server) if n >= 2 else None
    if sched is None:
        return LoadProfile(np.zeros(0), [], [], [], [], {})
    leaf = [cfg.gpu_leaf(g) for g in gpus]
    port = [cfg.gpu_port(g) for g in gpus]
    server = [cfg.gpu_server(g) for g in gpus]

    rng = random.Random(seed)
    pair_path: dict[tuple[int, int], tuple] = {}

    def ecmp_path(src, dst):
        key = (src, dst)
        if key not in pair_path:
            sport = rng.randint(32768, 60999)
            view = routing.FabricView(leaf, port, cfg.spines,
                                      cfg.links_per_pair, rank_server=server)
            up = routing._hash_uplink(view, src, dst, sport)
            spine = up % cfg.spines
            pair_path[key] = (
                _link_index(cfg, 0, leaf[src], spine),
                _link_index(cfg, 1, leaf[dst], spine),
            )
        return pair_path[key]

    step_base = []
    flow_bytes, flow_step, link_ids, flow_starts = [], [], [], []
    w: dict[int, int] = {}
    base_loads = global_loads.copy() if global_loads is not None else None
    for si, st in enumerate(sched.steps):
        base = 0.0
        step_w: dict[int, int] = {}
        order = list(range(len(st.flows)))
        if strategy == "balanced":
            rng.shuffle(order)
            work = base_loads.copy() if base_loads is not None else np.zeros(
                2 * cfg.leaves * cfg.spines)
        for fi in order:
            f = st.flows[fi]
            if f.local:
                continue
            base = max(base, f.nbytes)
            ls, ld = leaf[f.src], leaf[f.dst]
            if ls == ld:
                continue
            if strategy == "ecmp":
                path = ecmp_path(f.src, f.dst)
            elif strategy == "balanced":
                lo = _link_index(cfg, 0, ls, 0)
                slice_ = work[lo:lo + cfg.spines]
                best = slice_.min()
                ties = np.flatnonzero(slice_ == best)
                spine = int(ties[rng.randrange(ties.size)])
                path = (_link_index(cfg, 0, ls, spine),
                        _link_index(cfg, 1, ld, spine))
                work[path[0]] += 1
                work[path[1]] += 1
            else:  # source routing on the physical fabric
                spine = port[f.src] % cfg.spines
                path = (_link_index(cfg, 0, ls, spine),
                        _link_index(cfg, 1, ld, spine))
            flow_bytes.append(f.nbytes)
            flow_step.append(si)
            flow_starts.append(len(link_ids))
            link_ids.extend(path)
            for link in path:
                step_w[link] = step_w.get(link, 0) + 1
        step_base.append(base / capacity)
        for link, cnt in step_w.items():
            if cnt > w.get(link, 0):
                w[link] = cnt
    return LoadProfile(np.array(step_base), flow_bytes, flow_step,
                       link_ids, flow_starts, w)


def vclos_self_comm_time(job: Job, alloc, cfg: ClusterConfig,
                         capacity: float) -> float:
    """Communication time inside an isolated vClos: only the job's own
    flows can contend (possible when the grid is padded beyond N)."""
    n = job.profile.n_gpus
    if n < 2 or not alloc.uses_fabric or not alloc.s_m:
        return ideal_comm_time_for(job, cfg, capacity)
    s = alloc.s
    sched = _cached_schedule(job.profile.collective, n,
                             job.profile.comm_bytes_per_iter, cfg.gpus_per_server)
    total = 0.0
    for st in sched.steps:
        base = 0.0
        counts: dict[tuple, int] = {}
        paths = []
        for f in st.flows:
            if f.local:
                continue
            base = max(base, f.nbytes)
            vl_s, vl_d = f.src // s, f.dst // s
            if vl_s == vl_d:
                continue
            spine = f.src % s
            path = (("u", vl_s, spine), ("d", vl_d, spine))
            paths.append((f.nbytes, path))
            for link in path:
                counts[link] = counts.get(link, 0) + 1
        worst = base / capacity
        for nbytes, path in paths:
            load = max(counts[link] for link in path)
            worst = max(worst, nbytes * load / capacity)
        total += worst
    return total


def ideal_comm_time_for(job: Job, cfg: ClusterConfig, capacity: float) -> float:
    return ideal_comm_time(job.profile, capacity, cfg.gpus_per_server)


# ----------------------------------------------------------------- scheduling

def schedule_next(queue: list, policy: str, now: float,
                  deadlines: dict | None = None) -> list:
    """Candidate order for placement.  FIFO exposes only the head (strict
    head-of-line blocking); EDF and FF rescan the whole queue."""
    if policy == "fifo":
        return queue[:1]
    if policy == "edf":
        deadlines = deadlines or {}
        return sorted(queue, key=lambda j: (deadlines.get(j.job_id, 0.0), j.job_id))
    if policy == "ff":
        return sorted(queue, key=lambda j: (j.profile.n_gpus, j.job_id))
    raise ValueError("unknown scheduler %r" % policy)


def fragmentation_probe(cluster: PhysicalCluster, n_gpus: int,
                        nofit: NoFit) -> str:
    if cluster.idle_gpus() >= n_gpus and nofit.reason in ("network", "timeout"):
        return "network_caused"
    return "gpu_caused"


# --------------------------------------------------------------------- report

@dataclass
class JobRecord:
    job_id: str
    model_tag: str
    n_gpus: int
    batch_size: str
    arrival: float
    start: float = math.nan
    finish: float = math.nan
    status: str = "finished"

    @property
    def jwt(self) -> float:
        return self.start - self.arrival

    @property
    def jrt(self) -> float:
        return self.finish - self.start

    @property
    def jct(self) -> float:
        return self.jwt + self.jrt


@dataclass
class SimReport:
    strategy: str
    scheduler: str
    seed: int
    config: dict
    jobs: list[JobRecord] = field(default_factory=list)
    queue_depth: list[tuple[float, int]] = field(default_factory=list)
    frag_gpu: int = 0
    frag_network: int = 0
    solver_timeouts: int = 0
    errors: list[str] = field(default_factory=list)

    def finished(self) -> list[JobRecord]:
        return [r for r in self.jobs if r.status == "finished"]

    def avg(self, attr: str) -> float:
        done = self.finished()
        if not done:
            return 0.0
        return sum(getattr(r, attr) for r in done) / len(done)

    def stability(self) -> float:
        return stability(self)

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "scheduler": self.scheduler,
            "seed": self.seed,
            "config": self.config,
            "jobs_finished": len(self.finished()),
            "jobs_failed": len(self.jobs) - len(self.finished()),
            "avg_jrt": self.avg("jrt"),
            "avg_jwt": self.avg("jwt"),
            "avg_jct": self.avg("jct"),
            "stability": self.stability(),
            "fragmentation": {"gpu_caused": self.frag_gpu,
                              "network_caused": self.frag_network},
            "solver_timeouts": self.solver_timeouts,
            "max_queue_depth": max((d for _t, d in self.queue_depth), default=0),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["job_id", "model_tag", "n_gpus", "batch_size",
                         "arrival", "start", "finish", "jwt", "jrt", "jct",
                         "status"])
            for r in self.jobs:
                wr.writerow([r.job_id, r.model_tag, r.n_gpus, r.batch_size,
                             "%.6f" % r.arrival, "%.6f" % r.start,
                             "%.6f" % r.finish, "%.6f" % r.jwt,
                             "%.6f" % r.jrt, "%.6f" % r.jct, r.status])


def stability(report: SimReport) -> float:
    """Average per-group population std of JCT; singleton groups excluded."""
    groups: dict = {}
    for r in report.finished():
        groups.setdefault((r.model_tag, r.n_gpus, r.batch_size), []).append(r.jct)
    sigmas = []
    for jcts in groups.values():
        if len(jcts) < 2:
            continue
        mu = sum(jcts) / len(jcts)
        sigmas.append(math.sqrt(sum((x - mu) ** 2 for x in jcts) / len(jcts)))
    return sum(sigmas) / len(sigmas) if sigmas else 0.0


# ------------------------------------------------------------------ the engine

_KIND_FINISH, _KIND_ARRIVAL = 0, 1


class _Running:
    __slots__ = ("job", "alloc", "profile_fp", "iter_time", "remaining",
                 "last_t", "epoch", "start")

    def __init__(self, job, alloc, fp, start):
        self.job = job
        self.alloc = alloc
        self.profile_fp = fp      # LoadProfile or None
        self.iter_time = 0.0
        self.remaining = float(job.profile.iterations)
        self.last_t = start
        self.start = start
        self.epoch = 0


def run(trace: list[Job], cluster_cfg: ClusterConfig, strategy: str,
        scheduler: str = "fifo", seed: int = 0,
        nic_gbps: float = NIC_GBPS_DEFAULT,
        ilp_budget: float = 10.0) -> SimReport:
    """Simulate one (trace, strategy, scheduler, seed) cell."""
    if strategy not in STRATEGIES:
        raise ValueError("unknown strategy %r" % strategy)
    if scheduler not in SCHEDULERS:
        raise ValueError("unknown scheduler %r" % scheduler)
    if not trace:
        raise ValueError("empty trace")
    capacity = nic_gbps * 1e9 / 8
    cfg = cluster_cfg
    cluster = build_cluster(cfg)
    report = SimReport(strategy, scheduler, seed, {
        "leaves": cfg.leaves, "spines": cfg.spines,
        "gpus_per_server": cfg.gpus_per_server, "ocs_count": cfg.ocs_count,
        "nic_gbps": nic_gbps,
    })
    shared_fabric = strategy in ("ecmp", "balanced", "sr", "ocs_relax")
    reserving = strategy in ("vclos", "ocs")

    loads = np.zeros(2 * cfg.leaves * cfg.spines)
    link_users: dict[int, set] = {}
    running: dict[str, _Running] = {}
    records: dict[str, JobRecord] = {}
    queue: list[Job] = []
    deadlines: dict[str, float] = {}
    fail_version: dict[str, int] = {}
    free_version = 0  # bumps only when resources are released
    heap: list = []

    for job in sorted(trace, key=lambda j: (j.arrival_time, j.job_id)):
        rec = JobRecord(job.job_id, job.profile.model_tag, job.profile.n_gpus,
                        job.profile.batch_size, job.arrival_time)
        records[job.job_id] = rec
        report.jobs.append(rec)
        heapq.heappush(heap, (job.arrival_time, _KIND_ARRIVAL, job.job_id, 0, job))

    def job_seed(job_id: str) -> int:
        return (zlib.crc32(job_id.encode()) ^ (seed * 0x9E3779B1)) & 0x7FFFFFFF

    def place_job(job: Job):
        req = JobRequest(job.job_id, job.profile.n_gpus, job.arrival_time)
        if strategy == "ocs_relax":
            return placement.place_scattered(req, cluster)
        if reserving:
            return placement.place(req, cluster, use_ocs=(strategy == "ocs"),
                                   time_budget=ilp_budget)
        return placement.place_loose(req, cluster)

    def refresh(rid: str, now: float):
        """Advance progress and recompute the finish event of one job."""
        rn = running[rid]
        if now > rn.last_t and rn.iter_time > 0:
            rn.remaining -= (now - rn.last_t) / rn.iter_time
            rn.remaining = max(rn.remaining, 0.0)
        rn.last_t = max(now, rn.start)
        if rn.profile_fp is not None:
            comm = rn.profile_fp.comm_time(loads, capacity)
        else:
            comm = running_comm_cache[rid]
        rn.iter_time = max(iteration_time(rn.job.profile, comm), 1e-12)
        rn.epoch += 1
        finish = rn.last_t + rn.remaining * rn.iter_time
        heapq.heappush(heap, (finish, _KIND_FINISH, rid, rn.epoch, None))

    running_comm_cache: dict[str, float] = {}

    def overlay_add(rid: str, fp: LoadProfile, now: float):
        affected = set()
        for link, wt in fp.w.items():
            loads[link] += wt
            users = link_users.setdefault(link, set())
            affected |= users
            users.add(rid)
        for other in affected:
            refresh(other, now)

    def overlay_remove(rid: str, fp: LoadProfile, now: float):
        affected = set()
        for link, wt in fp.w.items():
            loads[link] -= wt
            users = link_users.get(link, set())
            users.discard(rid)
            affected |= users
        for other in affected:
            refresh(other, now)

    def start_job(job: Job, alloc, now: float):
        delay = 0.0
        if reserving:
            delay = cluster.reserve(alloc)
        else:
            # non-reserving strategies still occupy GPUs
            for g in alloc.gpus:
                cluster.gpu_owner[g] = job.job_id
                cluster.server_idle[cfg.gpu_server(g)] -= 1
            cluster.allocs[job.job_id] = alloc
        start = now + delay
        gpus = alloc.gpus[:job.profile.n_gpus]
        fp = None
        if shared_fabric and job.profile.n_gpus >= 2:
            fp = build_load_profile(job, gpus, cfg, strategy,
                                    job_seed(job.job_id), capacity,
                                    loads if strategy == "balanced" else None)
        rn = _Running(job, alloc, fp, start)
        running[job.job_id] = rn
        records[job.job_id].start = start
        if fp is not None:
            running_comm_cache[job.job_id] = 0.0
            overlay_add(job.job_id, fp, now)
        else:
            if strategy == "best" or not alloc.uses_fabric:
                comm = ideal_comm_time_for(job, cfg, capacity)
            else:
                comm = vclos_self_comm_time(job, alloc, cfg, capacity)
            running_comm_cache[job.job_id] = comm
        refresh(job.job_id, start)

    def finish_job(rid: str, now: float):
        nonlocal free_version
        rn = running.pop(rid)
        records[rid].finish = now
        if reserving:
            cluster.release(rn.alloc)
        else:
            cluster.allocs.pop(rid, None)
            for g in rn.alloc.gpus:
                cluster.gpu_owner[g] = None
                cluster.server_idle[cfg.gpu_server(g)] += 1
        free_version += 1
        running_comm_cache.pop(rid, None)
        if rn.profile_fp is not None:
            overlay_remove(rid, rn.profile_fp, now)

    def try_schedule(now: float):
        while True:
            order = schedule_next(queue, scheduler, now, deadlines)
            progressed = False
            for pos, job in enumerate(order):
                if fail_version.get(job.job_id) == free_version:
                    if scheduler == "fifo":
                        break
                    continue
                got = place_job(job)
                if is_nofit(got):
                    fail_version[job.job_id] = free_version
                    if got.reason == "timeout":
                        report.solver_timeouts += 1
                    if pos == 0:
                        kind = fragmentation_probe(cluster, job.profile.n_gpus, got)
                        if kind == "network_caused":
                            report.frag_network += 1
                        else:
                            report.frag_gpu += 1
                    if not running and len(cluster.allocs) == 0:
                        # unplaceable even on an empty cluster: drop it
                        queue.remove(job)
                        records[job.job_id].status = "unplaceable"
                        report.errors.append("%s unplaceable" % job.job_id)
                        progressed = True
                        break
                    if scheduler == "fifo":
                        break
                    continue
                queue.remove(job)
                start_job(job, got, now)
                progressed = True
                break
            if not progressed:
                break

    while heap:
        time_, kind, jid, epoch, payload = heapq.heappop(heap)
        if kind == _KIND_FINISH:
            rn = running.get(jid)
            if rn is None or rn.epoch != epoch:
                continue  # stale event
            # guard against drift: treat as done when nearly complete
            rn.remaining -= (time_ - rn.last_t) / rn.iter_time
            rn.last_t = time_
            if rn.remaining > 1e-6:
                rn.epoch += 1
                heapq.heappush(heap, (time_ + rn.remaining * rn.iter_time,
                                      _KIND_FINISH, jid, rn.epoch, None))
                continue
            finish_job(jid, time_)
            try_schedule(time_)
        else:
            job = payload
            if job.profile.n_gpus > cfg.num_gpus:
                records[jid].status = "rejected"
                report.errors.append(
                    "%s needs %d GPUs, cluster has %d"
                    % (jid, job.profile.n_gpus, cfg.num_gpus))
            else:
                queue.append(job)
                deadlines[jid] = job.arrival_time + 2.0 * ideal_runtime(
                    job.profile, ranks_per_server=cfg.gpus_per_server)
                try_schedule(time_)
            report.queue_depth.append((time_, len(queue)))
    # anything left in the queue could never be placed
    for job in queue:
        records[job.job_id].status = "unplaceable"
        report.errors.append("%s never placed" % job.job_id)
    return report
