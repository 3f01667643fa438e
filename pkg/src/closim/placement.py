"""Job placement: staged vClos and OCS-vClos allocation.

Stage 0 packs small jobs into one server, stage 1 into one leaf.  Stage 2
(vClos) carves an l x s virtual Leaf-Spine out of the fabric via an
integer program; with an OCS layer, stage 2 first tries wiring all GPUs
to a single spine (rewiring only idle links) and stage 3 generalizes the
integer program to rewired shapes.

Virtual leaves in the electric-only program are one-per-physical-leaf,
which reduces feasibility to "every chosen (leaf, spine) pair has a free
link"; the OCS program instead works on per-side idle-fiber aggregates.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

from .ilp import Infeasible, IlpTimeout, IntegerProgram, ilp_solve
from .topology import PhysicalCluster, VirtualClos, leaf_end, spine_end


@dataclass
class JobRequest:
    job_id: str
    n_gpus: int
    arrival_time: float = 0.0

    def __post_init__(self):
        if self.n_gpus < 1:
            raise ValueError("n_gpus must be >= 1")


@dataclass
class NoFit:
    reason: str  # "gpu" | "network" | "timeout"

    def __bool__(self):
        return False


def is_nofit(x) -> bool:
    return isinstance(x, NoFit)


# ------------------------------------------------------------------ stages 0/1

def stage0_single_server(req: JobRequest, cluster: PhysicalCluster):
    """Best-fit into the feasible server with fewest idle GPUs."""
    cfg = cluster.config
    if req.n_gpus > cfg.gpus_per_server:
        return NoFit("gpu")
    best = None
    for sv, idle in enumerate(cluster.server_idle):
        if idle >= req.n_gpus and (best is None or idle < cluster.server_idle[best]):
            best = sv
    if best is None:
        return NoFit("gpu")
    gpus = [g for g in cluster.config.server_gpus(best) if cluster.gpu_free(g)]
    gpus = gpus[:req.n_gpus]
    leaf = cfg.server_leaf(best)
    return VirtualClos(job_id=req.job_id, gpus=gpus, l=1, s=req.n_gpus,
                       l_n={leaf: 1}, r_n={leaf: 1})


def stage1_single_leaf(req: JobRequest, cluster: PhysicalCluster):
    """Best-fit into the leaf with fewest (but enough) idle servers."""
    cfg = cluster.config
    if req.n_gpus <= cfg.gpus_per_server:
        return NoFit("gpu")
    need = math.ceil(req.n_gpus / cfg.gpus_per_server)
    if need > cfg.servers_per_leaf:
        return NoFit("gpu")
    best = None
    for n in range(cfg.leaves):
        idle = cluster.idle_servers(n)
        if idle >= need and (best is None or idle < cluster.idle_servers(best)):
            best = n
    if best is None:
        return NoFit("gpu")
    gpus = _take_servers(cluster, best, need)
    return VirtualClos(job_id=req.job_id, gpus=gpus[:req.n_gpus], l=1,
                       s=req.n_gpus, l_n={best: 1}, r_n={best: need})


def _take_servers(cluster: PhysicalCluster, leaf: int, count: int) -> list[int]:
    """GPUs of the `count` lowest-index fully idle servers under a leaf."""
    cfg = cluster.config
    base = leaf * cfg.servers_per_leaf
    out = []
    for sv in range(base, base + cfg.servers_per_leaf):
        if len(out) // cfg.gpus_per_server >= count:
            break
        if cluster.server_idle[sv] == cfg.gpus_per_server:
            out.extend(cfg.server_gpus(sv))
    return out[:count * cfg.gpus_per_server]


# -------------------------------------------------------------- normalization

def shape_candidates(n: int, cluster: PhysicalCluster) -> tuple[int, list[tuple[int, int]]]:
    """Smallest N' >= n (multiple of T) admitting l x s Clos shapes,
    together with those shapes in search order (fewest leaves first)."""
    cfg = cluster.config
    t = cfg.gpus_per_server
    n_round = math.ceil(n / t) * t
    while n_round <= cfg.num_gpus:
        shapes = []
        for l in range(2, cfg.leaves + 1):
            if n_round % l == 0:
                s = n_round // l
                if s % t == 0 and s <= cfg.spines and s >= 1:
                    shapes.append((l, s))
        if shapes:
            return n_round, shapes
        n_round += t
    return n, []


# --------------------------------------------------------------- vClos stage 2

def _impact_objective(cluster: PhysicalCluster) -> dict[str, float]:
    """Minimize impact on idle resources; the epsilon terms make ties
    resolve to the lowest leaf/spine indices."""
    cfg = cluster.config
    eps = 1e-7
    obj = {}
    for m in range(cfg.spines):
        obj["s_%d" % m] = float(cluster.rpn(m)) + eps * m
    for n in range(cfg.leaves):
        obj["l_%d" % n] = float(cluster.rsn(n) * cfg.gpus_per_server) + eps * n
    return obj


def _solve_vclos_exact(cluster: PhysicalCluster, l: int, s: int):
    """Exact minimum of the stage-2 program: pick l leaves and s spines
    so that every chosen (leaf, spine) pair has a free link.

    The free matrix is only leaves x spines, so enumerating leaf subsets
    (intersecting free-spine bitmasks) beats the generic solver by
    orders of magnitude while returning the identical argmin.
    """
    cfg = cluster.config
    t = cfg.gpus_per_server
    eps = 1e-7
    r = s // t
    free = cluster.free_matrix()
    rows = []
    for n in range(cfg.leaves):
        if cluster.idle_servers(n) < r:
            continue
        mask = 0
        for m in range(cfg.spines):
            if free[n][m]:
                mask |= 1 << m
        if mask.bit_count() >= s:
            rows.append((n, mask, cluster.rsn(n) * t + eps * n))
    if len(rows) < l:
        return None
    col_cost = [float(cluster.rpn(m)) + eps * m for m in range(cfg.spines)]
    cols_sorted = sorted(range(cfg.spines), key=col_cost.__getitem__)
    best = None
    for combo in itertools.combinations(rows, l):
        mask = -1
        row_cost = 0.0
        for _n, m, c in combo:
            mask &= m
            row_cost += c
        if mask.bit_count() < s:
            continue
        cost = row_cost
        chosen = []
        for m in cols_sorted:
            if mask >> m & 1:
                chosen.append(m)
                cost += col_cost[m]
                if len(chosen) == s:
                    break
        if best is None or cost < best[0]:
            best = (cost, [n for n, _m, _c in combo], chosen)
    if best is None:
        return None
    return best[1], sorted(best[2])


def find_vclos(req: JobRequest, cluster: PhysicalCluster,
               time_budget: float = 10.0):
    """Stage 2: first feasible shape in the search order, links chosen
    by the minimum-impact objective."""
    cfg = cluster.config
    n_round, shapes = shape_candidates(req.n_gpus, cluster)
    if not shapes:
        return NoFit("gpu")
    if cluster.idle_gpus() < n_round:
        return NoFit("gpu")
    for (l, s) in shapes:
        r = s // cfg.gpus_per_server
        # cheap feasibility screens before the exact search
        if sum(1 for n in range(cfg.leaves) if cluster.idle_servers(n) >= r) < l:
            continue
        if sum(1 for m in range(cfg.spines) if cluster.rpn(m) >= l) < s:
            continue
        got = _solve_vclos_exact(cluster, l, s)
        if got is None:
            continue
        leaves, spines = got
        return _build_vclos(req, cluster, l, s, leaves, spines)
    return NoFit("network")


def _build_vclos(req: JobRequest, cluster: PhysicalCluster, l: int, s: int,
                 leaves: list[int], spines: list[int]) -> VirtualClos:
    cfg = cluster.config
    r = s // cfg.gpus_per_server
    gpus = []
    for n in leaves:
        gpus.extend(_take_servers(cluster, n, r))
    c = {}
    for n in leaves:
        for m in spines:
            c[(leaf_end(n), spine_end(m))] = 1
    return VirtualClos(
        job_id=req.job_id, gpus=gpus, l=l, s=s,
        l_n={n: 1 for n in leaves}, s_m={m: 1 for m in spines},
        r_n={n: r for n in leaves}, c=c,
    )


# ----------------------------------------------------------------- OCS stage 2

def _pick_servers_across_leaves(cluster: PhysicalCluster, need: int):
    """Whole idle servers from best-fit leaves (fewest idle servers first,
    lowest index ties).  Returns list of (leaf, server_count) or None."""
    cfg = cluster.config
    cand = sorted(
        (n for n in range(cfg.leaves) if cluster.idle_servers(n) > 0),
        key=lambda n: (cluster.idle_servers(n), n),
    )
    picked = []
    left = need
    for n in cand:
        take = min(cluster.idle_servers(n), left)
        picked.append((n, take))
        left -= take
        if left == 0:
            return picked
    return None


def ocs_stage2_single_spine(req: JobRequest, cluster: PhysicalCluster):
    """Wire every allocated GPU's uplink to one spine (or, for a 2-leaf
    job, directly leaf-to-leaf) by rewiring only idle links."""
    cfg = cluster.config
    if cfg.ocs_count == 0:
        return NoFit("network")
    t = cfg.gpus_per_server
    need = math.ceil(req.n_gpus / t)
    picked = _pick_servers_across_leaves(cluster, need)
    if picked is None:
        return NoFit("gpu")
    n_links = need * t  # one uplink per GPU port

    gpus = []
    r_n = {}
    for n, cnt in sorted(picked):
        gpus.extend(_take_servers(cluster, n, cnt))
        r_n[n] = cnt

    if len(picked) == 2:
        alloc = _leaf_to_leaf_alloc(req, cluster, picked, gpus, r_n)
        if not is_nofit(alloc):
            return alloc

    # spine with least but enough free ports
    best = None
    for m in range(cfg.spines):
        ports = cluster.rpn(m)
        if ports >= n_links and (best is None or ports < cluster.rpn(best)):
            best = m
    if best is None:
        return NoFit("network")
    m = best
    c = {}
    plan = []
    for n, cnt in sorted(picked):
        want = cnt * t
        have = cluster.free_count(n, m)
        c[(leaf_end(n), spine_end(m))] = want
        for _ in range(max(0, want - have)):
            plan.append((_shared_ocs(cluster), None, (leaf_end(n), spine_end(m))))
    # single-spine shape: not an l x s grid, so s_m stays empty and the
    # grid invariants do not apply
    alloc = VirtualClos(
        job_id=req.job_id, gpus=gpus, l=len(picked), s=n_links,
        l_n={n: 1 for n, _ in picked}, r_n=r_n, c=c,
        rewire_plan=plan,
    )
    if not _rewire_plan_ok(cluster, alloc):
        return NoFit("network")
    return alloc


def _leaf_to_leaf_alloc(req: JobRequest, cluster: PhysicalCluster,
                        picked, gpus, r_n):
    """2-leaf job wired directly through the OCS, zero spine ports."""
    cfg = cluster.config
    (na, ca), (nb, cb) = sorted(picked)
    width = min(ca, cb) * cfg.gpus_per_server
    a, b = leaf_end(na), leaf_end(nb)
    have = sum(
        len(cluster.free_links.get((k, a, b), []))
        + len(cluster.free_links.get((k, b, a), []))
        for k in range(cluster.k_count)
    )
    plan = [(_shared_ocs(cluster), None, (a, b))
            for _ in range(max(0, width - have))]
    alloc = VirtualClos(
        job_id=req.job_id, gpus=gpus, l=2, s=width,
        l_n={na: 1, nb: 1}, r_n=r_n, c={(a, b): width}, rewire_plan=plan,
    )
    if not _rewire_plan_ok(cluster, alloc):
        return NoFit("network")
    return alloc


def _shared_ocs(cluster: PhysicalCluster) -> int:
    return 0


def _rewire_plan_ok(cluster: PhysicalCluster, alloc: VirtualClos) -> bool:
    """Dry-run the whole reservation (rewires + link demand) without
    mutating anything."""
    try:
        if alloc.rewire_plan:
            cluster._apply_rewires(alloc.rewire_plan, dry_run=True, keep=alloc.c)
        scratch = {pos: list(ids) for pos, ids in cluster.free_links.items()}
        if alloc.rewire_plan:
            cluster._apply_rewires(alloc.rewire_plan, dry_run=False,
                                   target=scratch, dangling=dict(cluster.dangling),
                                   keep=alloc.c)
        for (ea, eb), cnt in alloc.c.items():
            pool = 0
            for k in range(cluster.k_count):
                pool += len(scratch.get((k, ea, eb), []))
                pool += len(scratch.get((k, eb, ea), []))
            if pool < cnt:
                return False
        return True
    except Exception:
        return False


# ----------------------------------------------------------------- OCS stage 3

def _ocs_program(cluster: PhysicalCluster, l: int, s: int) -> IntegerProgram:
    cfg = cluster.config
    t = cfg.gpus_per_server
    p = IntegerProgram()
    leaf_cap = []
    for n in range(cfg.leaves):
        fibers = sum(cluster.idle_leaf_fibers(k, n) for k in range(cluster.k_count))
        # virtual leaves hosted on leaf n: limited by idle servers and
        # idle uplink fibers, s GPUs (and s uplinks) per virtual leaf
        hi = min(cluster.idle_servers(n) * t // s if s else 0, fibers // s if s else 0)
        leaf_cap.append(hi)
        p.add_var("l_%d" % n, 0, min(hi, l))
    for m in range(cfg.spines):
        fibers = sum(cluster.idle_spine_fibers(k, m) for k in range(cluster.k_count))
        p.add_var("s_%d" % m, 0, 1 if fibers >= l else 0)
    p.add_constraint({"l_%d" % n: 1 for n in range(cfg.leaves)}, "==", l)
    p.add_constraint({"s_%d" % m: 1 for m in range(cfg.spines)}, "==", s)
    p.set_objective(_impact_objective(cluster))
    return p


def ocs_find_clos(req: JobRequest, cluster: PhysicalCluster,
                  time_budget: float = 10.0):
    """Stage 3: doubling loop over the OCS program; multiple virtual
    leaves may share a physical leaf, links rewired as needed."""
    cfg = cluster.config
    if cfg.ocs_count == 0:
        return NoFit("network")
    t = cfg.gpus_per_server
    n_round, shapes = shape_candidates(req.n_gpus, cluster)
    if not shapes:
        return NoFit("gpu")
    if cluster.idle_gpus() < n_round:
        return NoFit("gpu")
    timed_out = False
    for (l, s) in shapes:
        prog = _ocs_program(cluster, l, s)
        try:
            sol = ilp_solve(prog, time_budget)
        except Infeasible:
            continue
        except IlpTimeout:
            timed_out = True
            continue
        l_n = {n: sol.values["l_%d" % n] for n in range(cfg.leaves)
               if sol.values["l_%d" % n] > 0}
        spines = [m for m in range(cfg.spines) if sol.values["s_%d" % m]]
        alloc = _build_ocs_vclos(req, cluster, l, s, l_n, spines)
        if not is_nofit(alloc):
            return alloc
    return NoFit("timeout" if timed_out else "network")


def _build_ocs_vclos(req: JobRequest, cluster: PhysicalCluster, l: int, s: int,
                     l_n: dict[int, int], spines: list[int]):
    cfg = cluster.config
    t = cfg.gpus_per_server
    gpus = []
    r_n = {}
    for n in sorted(l_n):
        r = s * l_n[n] // t
        r_n[n] = r
        gpus.extend(_take_servers(cluster, n, r))
    c = {}
    plan = []
    # spine count per virtual spine m: one link per virtual leaf
    for n in sorted(l_n):
        for m in spines:
            want = l_n[n]
            have = cluster.free_count(n, m)
            c[(leaf_end(n), spine_end(m))] = want
            for _ in range(max(0, want - have)):
                plan.append((_shared_ocs(cluster), None, (leaf_end(n), spine_end(m))))
    alloc = VirtualClos(
        job_id=req.job_id, gpus=gpus, l=l, s=s,
        l_n=dict(l_n), s_m={m: 1 for m in spines}, r_n=r_n, c=c,
        rewire_plan=plan,
    )
    if not _rewire_plan_ok(cluster, alloc):
        return NoFit("network")
    return alloc


# ---------------------------------------------------------------- orchestrator

def place(req: JobRequest, cluster: PhysicalCluster, use_ocs: bool = False,
          time_budget: float = 10.0):
    """Full staged pipeline; returns VirtualClos or NoFit."""
    cfg = cluster.config
    if req.n_gpus > cfg.num_gpus:
        return NoFit("gpu")
    if cluster.idle_gpus() < req.n_gpus:
        return NoFit("gpu")
    if req.n_gpus <= cfg.gpus_per_server:
        got = stage0_single_server(req, cluster)
        if not is_nofit(got):
            return got
        # a small job can still spill to a leaf/fabric allocation when
        # every server is fragmented
    got = stage1_single_leaf(req, cluster) if req.n_gpus > cfg.gpus_per_server else NoFit("gpu")
    if not is_nofit(got):
        return got
    if use_ocs and cfg.ocs_count > 0:
        got = ocs_stage2_single_spine(req, cluster)
        if not is_nofit(got):
            return got
        got = ocs_find_clos(req, cluster, time_budget)
        if not is_nofit(got):
            return got
        return got
    return find_vclos(req, cluster, time_budget)


def place_loose(req: JobRequest, cluster: PhysicalCluster):
    """Placement for non-reserving strategies: same server/leaf locality,
    but stage 2 just grabs whole idle servers anywhere (no links)."""
    cfg = cluster.config
    if req.n_gpus > cfg.num_gpus:
        return NoFit("gpu")
    if req.n_gpus <= cfg.gpus_per_server:
        got = stage0_single_server(req, cluster)
        if not is_nofit(got):
            return got
    else:
        got = stage1_single_leaf(req, cluster)
        if not is_nofit(got):
            return got
    need = math.ceil(req.n_gpus / cfg.gpus_per_server)
    picked = _pick_servers_across_leaves(cluster, need)
    if picked is None:
        return NoFit("gpu")
    gpus = []
    r_n = {}
    for n, cnt in sorted(picked):
        gpus.extend(_take_servers(cluster, n, cnt))
        r_n[n] = cnt
    return VirtualClos(job_id=req.job_id, gpus=gpus, l=len(picked),
                       s=req.n_gpus, l_n={n: 1 for n, _ in picked}, r_n=r_n)


def place_scattered(req: JobRequest, cluster: PhysicalCluster):
    """Locality dropped entirely: any idle GPUs, lowest index first."""
    if req.n_gpus > cluster.config.num_gpus:
        return NoFit("gpu")
    gpus = [g for g in range(cluster.config.num_gpus) if cluster.gpu_free(g)]
    if len(gpus) < req.n_gpus:
        return NoFit("gpu")
    return VirtualClos(job_id=req.job_id, gpus=gpus[:req.n_gpus], l=0,
                       s=req.n_gpus)


# ------------------------------------------------------------------- checking

def verify_alloc(alloc: VirtualClos, cluster: PhysicalCluster) -> list[str]:
    """Machine-check the allocation invariants; empty list means OK."""
    cfg = cluster.config
    t = cfg.gpus_per_server
    bad = []
    if sum(alloc.l_n.values()) not in (alloc.l, 0):
        bad.append("sum l_n != l")
    if alloc.s_m and sum(alloc.s_m.values()) != len(alloc.s_m):
        bad.append("s_m not 0/1 counts")
    if alloc.uses_fabric and alloc.l > 1:
        per_leaf = {}
        per_spine = {}
        for (ea, eb), cnt in alloc.c.items():
            if cnt < 0:
                bad.append("negative link count")
            if ea[0] == "L":
                per_leaf[ea[1]] = per_leaf.get(ea[1], 0) + cnt
            if eb[0] == "S":
                per_spine[eb[1]] = per_spine.get(eb[1], 0) + cnt
            elif eb[0] == "L":
                per_leaf[eb[1]] = per_leaf.get(eb[1], 0) + cnt
        if alloc.s_m:  # spine-based vClos
            for n, ln in alloc.l_n.items():
                if per_leaf.get(n, 0) != alloc.s * ln:
                    bad.append("leaf %d uplinks %d != s*l_n %d"
                               % (n, per_leaf.get(n, 0), alloc.s * ln))
            for m in alloc.s_m:
                if per_spine.get(m, 0) != alloc.l:
                    bad.append("spine %d links %d != l" % (m, per_spine.get(m, 0)))
    for n, r in alloc.r_n.items():
        gpus_here = [g for g in alloc.gpus if cfg.gpu_leaf(g) == n]
        if len(gpus_here) != r * t:
            bad.append("leaf %d holds %d GPUs, r_n says %d servers"
                       % (n, len(gpus_here), r))
    if len(set(alloc.gpus)) != len(alloc.gpus):
        bad.append("duplicate GPUs")
    if alloc.gpus != sorted(alloc.gpus):
        bad.append("GPUs not in ascending physical order")
    return bad
