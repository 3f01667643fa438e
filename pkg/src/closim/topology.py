"""Physical Leaf-Spine cluster model with optional OCS layer.

Owns all reservation/release/rewire state. The fabric is a uniform
bipartite graph: every (leaf, spine) pair gets `links_per_pair` links.
When an OCS layer is present, each physical link passes through exactly
one OCS and idle links can be rewired to a different endpoint pair.

All mutations happen on the single simulation thread; snapshots are
plain dicts safe to hand elsewhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional


class TopologyError(Exception):
    """Invalid configuration or an operation violating cluster state."""


# Link endpoints. A link always has a leaf end; the far end is a spine,
# or (for the OCS leaf-to-leaf shortcut) another leaf.
def leaf_end(n: int) -> tuple:
    return ("L", n)


def spine_end(m: int) -> tuple:
    return ("S", m)


@dataclass(frozen=True)
class ClusterConfig:
    leaves: int
    spines: int
    gpus_per_server: int
    links_per_pair: int = 1
    ocs_count: int = 0
    ocs_rewire_delay: float = 0.05

    def __post_init__(self):
        if self.leaves < 1 or self.spines < 1 or self.gpus_per_server < 1:
            raise TopologyError("leaves, spines and gpus_per_server must be >= 1")
        if self.spines % self.gpus_per_server != 0:
            raise TopologyError(
                "spines (%d) must be a multiple of gpus_per_server (%d): "
                "each leaf hosts whole servers" % (self.spines, self.gpus_per_server)
            )
        if self.links_per_pair < 1:
            raise TopologyError("links_per_pair must be >= 1")
        if self.ocs_count < 0:
            raise TopologyError("ocs_count must be >= 0")

    @property
    def servers_per_leaf(self) -> int:
        return self.spines // self.gpus_per_server

    @property
    def num_servers(self) -> int:
        return self.leaves * self.servers_per_leaf

    @property
    def num_gpus(self) -> int:
        return self.leaves * self.spines

    @property
    def total_links(self) -> int:
        return self.leaves * self.spines * self.links_per_pair

    # GPU id layout: gpu g sits on leaf g // S at leaf port g % S;
    # port p belongs to server p // T of that leaf.
    def gpu_leaf(self, gpu: int) -> int:
        return gpu // self.spines

    def gpu_port(self, gpu: int) -> int:
        return gpu % self.spines

    def gpu_server(self, gpu: int) -> int:
        return self.gpu_leaf(gpu) * self.servers_per_leaf + self.gpu_port(gpu) // self.gpus_per_server

    def server_leaf(self, server: int) -> int:
        return server // self.servers_per_leaf

    def server_gpus(self, server: int) -> list[int]:
        leaf = self.server_leaf(server)
        local = server % self.servers_per_leaf
        base = leaf * self.spines + local * self.gpus_per_server
        return list(range(base, base + self.gpus_per_server))


@dataclass
class VirtualClos:
    """A job's reserved allocation: GPUs, virtual shape, link set.

    For single-server / single-leaf allocations the fabric is untouched:
    ``l == 1`` and ``links`` is empty.  ``links`` maps concrete physical
    link ids to their (ocs, end_a, end_b) position at reservation time.
    ``rewire_plan`` lists OCS moves to perform before reserving.
    """

    job_id: str
    gpus: list[int]
    l: int
    s: int
    l_n: dict[int, int] = field(default_factory=dict)   # leaf -> virtual leaf count
    s_m: dict[int, int] = field(default_factory=dict)   # spine -> virtual spine count
    r_n: dict[int, int] = field(default_factory=dict)   # leaf -> servers used
    c: dict[tuple, int] = field(default_factory=dict)   # (end_a, end_b) -> link count
    link_ids: list[int] = field(default_factory=list)   # filled in by reserve()
    rewire_plan: list = field(default_factory=list)     # [(ocs, old_pos|None, new_pos)]

    @property
    def uses_fabric(self) -> bool:
        return self.l > 1 or bool(self.c)

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "gpus": list(self.gpus),
            "l": self.l,
            "s": self.s,
            "l_n": {str(k): v for k, v in sorted(self.l_n.items())},
            "s_m": {str(k): v for k, v in sorted(self.s_m.items())},
            "r_n": {str(k): v for k, v in sorted(self.r_n.items())},
            "c": [[[list(k[0]), list(k[1])], v] for k, v in sorted(self.c.items())],
            "link_ids": sorted(self.link_ids),
            "rewire_plan": [
                [k, list(old) if old else None, list(new)]
                for (k, old, new) in self.rewire_plan
            ],
        }


class PhysicalCluster:
    """Mutable cluster state: GPU occupancy and link inventory.

    Every physical link has a stable integer id and a current position
    ``(ocs, end_a, end_b)``.  Links are free or reserved by exactly one
    allocation.  With no OCS layer the single pseudo-OCS 0 exists but
    rewiring is rejected.
    """

    def __init__(self, config: ClusterConfig):
        self.config = config
        cfg = config
        self.server_idle: list[int] = [cfg.gpus_per_server] * cfg.num_servers
        self.gpu_owner: list[Optional[str]] = [None] * cfg.num_gpus
        self.allocs: dict[str, VirtualClos] = {}

        k_count = max(cfg.ocs_count, 1)
        self.k_count = k_count
        # position -> list of free link ids; link id -> position
        self.free_links: dict[tuple, list[int]] = {}
        self.link_pos: dict[int, tuple] = {}
        self.reserved_by: dict[int, str] = {}
        # fixed per-OCS fiber budgets (port counts)
        self.leaf_ports: dict[tuple, int] = {}   # (k, n) -> count
        self.spine_ports: dict[tuple, int] = {}  # (k, m) -> count
        # dangling (unwired) fibers per (k, end)
        self.dangling: dict[tuple, int] = {}

        next_id = 0
        for n in range(cfg.leaves):
            for m in range(cfg.spines):
                for i in range(cfg.links_per_pair):
                    k = (n * cfg.spines * cfg.links_per_pair + m * cfg.links_per_pair + i) % k_count
                    pos = (k, leaf_end(n), spine_end(m))
                    self.free_links.setdefault(pos, []).append(next_id)
                    self.link_pos[next_id] = pos
                    self.leaf_ports[(k, leaf_end(n))] = self.leaf_ports.get((k, leaf_end(n)), 0) + 1
                    self.spine_ports[(k, spine_end(m))] = self.spine_ports.get((k, spine_end(m)), 0) + 1
                    next_id += 1

    # ---------------------------------------------------------------- queries

    def idle_gpus(self) -> int:
        return sum(self.server_idle)

    def idle_servers(self, leaf: int) -> int:
        """R_n: servers under this leaf with all GPUs idle."""
        cfg = self.config
        base = leaf * cfg.servers_per_leaf
        return sum(
            1 for sv in range(base, base + cfg.servers_per_leaf)
            if self.server_idle[sv] == cfg.gpus_per_server
        )

    def rsn(self, leaf: int) -> int:
        return self.idle_servers(leaf)

    def rpn(self, spine: int) -> int:
        """Free ports of a spine: unreserved incident links plus dangling fibers."""
        total = 0
        for pos, ids in self.free_links.items():
            if pos[2] == spine_end(spine):
                total += len(ids)
        for k in range(self.k_count):
            total += self.dangling.get((k, spine_end(spine)), 0)
        return total

    def free_count(self, n: int, m: int, k: Optional[int] = None) -> int:
        """Unused wired links between leaf n and spine m (optionally via OCS k)."""
        if k is not None:
            return len(self.free_links.get((k, leaf_end(n), spine_end(m)), []))
        return sum(
            len(self.free_links.get((kk, leaf_end(n), spine_end(m)), []))
            for kk in range(self.k_count)
        )

    def free_matrix(self) -> list[list[int]]:
        cfg = self.config
        return [
            [self.free_count(n, m) for m in range(cfg.spines)]
            for n in range(cfg.leaves)
        ]

    def idle_leaf_fibers(self, k: int, n: int) -> int:
        """C_n^k: rewireable leaf-side capacity of leaf n on OCS k."""
        total = self.dangling.get((k, leaf_end(n)), 0)
        for pos, ids in self.free_links.items():
            if pos[0] == k and (pos[1] == leaf_end(n) or pos[2] == leaf_end(n)):
                total += len(ids)
        return total

    def idle_spine_fibers(self, k: int, m: int) -> int:
        """C_m^k: rewireable spine-side capacity of spine m on OCS k."""
        total = self.dangling.get((k, spine_end(m)), 0)
        for pos, ids in self.free_links.items():
            if pos[0] == k and pos[2] == spine_end(m):
                total += len(ids)
        return total

    def gpu_free(self, gpu: int) -> bool:
        return self.gpu_owner[gpu] is None

    # ---------------------------------------------------------- state changes

    def reserve(self, alloc: VirtualClos) -> float:
        """Atomically reserve an allocation; returns setup delay in seconds.

        Applies the allocation's rewire plan first (if any), then marks
        GPUs and links as owned.  On any violation nothing is mutated.
        """
        if alloc.job_id in self.allocs:
            raise TopologyError("allocation %r already reserved" % alloc.job_id)
        for g in alloc.gpus:
            if self.gpu_owner[g] is not None:
                raise TopologyError("GPU %d already reserved" % g)
        if len(set(alloc.gpus)) != len(alloc.gpus):
            raise TopologyError("duplicate GPUs in allocation")

        # Validate the rewire plan and link demand against a scratch copy
        # of the link maps so a failure leaves state untouched.
        delay = 0.0
        demand = dict(alloc.c)
        if alloc.rewire_plan:
            if self.config.ocs_count == 0:
                raise TopologyError("rewire requested but cluster has no OCS layer")
            self._apply_rewires(alloc.rewire_plan, dry_run=True, keep=demand)

        scratch = {pos: list(ids) for pos, ids in self.free_links.items()}
        if alloc.rewire_plan:
            self._apply_rewires(alloc.rewire_plan, dry_run=False, target=scratch,
                                dangling=dict(self.dangling), keep=demand)
            delay = self.config.ocs_rewire_delay
        taken: list[int] = []
        for (end_a, end_b), cnt in sorted(demand.items()):
            pool: list[int] = []
            for k in range(self.k_count):
                pool.extend(sorted(scratch.get((k, end_a, end_b), [])))
            if len(pool) < cnt:
                raise TopologyError(
                    "not enough free links between %s and %s (need %d, have %d)"
                    % (end_a, end_b, cnt, len(pool))
                )
            taken.extend(pool[:cnt])

        # Commit: rewires, then ownership.
        if alloc.rewire_plan:
            self._apply_rewires(alloc.rewire_plan, dry_run=False, keep=demand)
        for g in alloc.gpus:
            self.gpu_owner[g] = alloc.job_id
            self.server_idle[self.config.gpu_server(g)] -= 1
        for lid in taken:
            pos = self.link_pos[lid]
            self.free_links[pos].remove(lid)
            self.reserved_by[lid] = alloc.job_id
        alloc.link_ids = taken
        self.allocs[alloc.job_id] = alloc
        return delay

    def release(self, alloc_or_id) -> None:
        """Free an allocation's GPUs and links; rewired links stay put."""
        job_id = alloc_or_id if isinstance(alloc_or_id, str) else alloc_or_id.job_id
        alloc = self.allocs.pop(job_id, None)
        if alloc is None:
            raise TopologyError("unknown allocation %r" % job_id)
        for g in alloc.gpus:
            self.gpu_owner[g] = None
            self.server_idle[self.config.gpu_server(g)] += 1
        for lid in alloc.link_ids:
            del self.reserved_by[lid]
            self.free_links.setdefault(self.link_pos[lid], []).append(lid)
        alloc.link_ids = []

    def rewire_ocs(self, k: int, moves: list) -> float:
        """Move free links through OCS k; returns the reconfiguration delay.

        Each move is ``(old_pos_ends, new_pos_ends)`` with positions given
        as ``(end_a, end_b)`` tuples; ``old`` may be None to plug using
        dangling fibers.  Moving a reserved link is a hard error and the
        whole batch is rejected.
        """
        if self.config.ocs_count == 0:
            raise TopologyError("cluster has no OCS layer")
        if not 0 <= k < self.k_count:
            raise TopologyError("no such OCS %d" % k)
        if not moves:
            return 0.0
        plan = [(k, old, new) for (old, new) in moves]
        self._apply_rewires(plan, dry_run=True)
        self._apply_rewires(plan, dry_run=False)
        return self.config.ocs_rewire_delay

    # Rewire mechanics.  Unplugging a free link frees one fiber at each
    # end; plugging consumes one fiber at each end.  If an end has no
    # free fiber, the lowest-id free link at that end (not at a position
    # being created by this plan) is displaced automatically, its far
    # end becoming a dangling fiber.
    def _apply_rewires(self, plan, dry_run: bool, target=None, dangling=None,
                       keep=None):
        scratch = dry_run or target is not None
        links = target if target is not None else (
            {pos: list(ids) for pos, ids in self.free_links.items()} if dry_run else self.free_links
        )
        dang = dangling if dangling is not None else (
            dict(self.dangling) if dry_run else self.dangling
        )
        pos_of = dict(self.link_pos) if scratch else self.link_pos
        next_id = max(self.link_pos, default=-1) + 1
        wanted = {(k, new[0], new[1]) for (k, _old, new) in plan}
        # plugs still pending per target position; a wanted position may
        # give up surplus links as long as demand (``keep``) stays covered
        pending: dict = {}
        for (k, _old, new) in plan:
            pos = (k, new[0], new[1])
            pending[pos] = pending.get(pos, 0) + 1

        def displaceable(pos, ids):
            if keep is None:
                return pos not in wanted
            demand = keep.get((pos[1], pos[2]), 0)
            return len(ids) + pending.get(pos, 0) - 1 >= demand

        def free_fiber(k, end):
            if dang.get((k, end), 0) > 0:
                dang[(k, end)] -= 1
                return
            best = None
            for pos, ids in links.items():
                if pos[0] != k or not ids or not displaceable(pos, ids):
                    continue
                if pos[1] == end or pos[2] == end:
                    cand = min(ids)
                    if best is None or cand < best[0]:
                        best = (cand, pos)
            if best is None:
                raise TopologyError("no idle fiber at OCS %d end %s" % (k, end))
            lid, pos = best
            links[pos].remove(lid)
            del pos_of[lid]
            other = pos[2] if pos[1] == end else pos[1]
            dang[(k, other)] = dang.get((k, other), 0) + 1

        for (k, old, new) in plan:
            pending[(k, new[0], new[1])] -= 1
            if old is not None:
                pos = (k, old[0], old[1])
                ids = links.get(pos, [])
                if not ids:
                    reserved_here = any(
                        self.link_pos[lid] == pos for lid in self.reserved_by
                    )
                    if reserved_here:
                        raise TopologyError(
                            "only idle links can be rewired: all links at %s busy" % (pos,)
                        )
                    raise TopologyError("no link at %s to move" % (pos,))
                lid = min(ids)
                ids.remove(lid)
                del pos_of[lid]
                dang[(k, old[0])] = dang.get((k, old[0]), 0) + 1
                dang[(k, old[1])] = dang.get((k, old[1]), 0) + 1
            else:
                lid = next_id
                next_id += 1
            free_fiber(k, new[0])
            free_fiber(k, new[1])
            new_pos = (k, new[0], new[1])
            links.setdefault(new_pos, []).append(lid)
            pos_of[lid] = new_pos

    # ------------------------------------------------------------- export

    def snapshot(self) -> dict:
        cfg = self.config
        return {
            "config": {
                "leaves": cfg.leaves,
                "spines": cfg.spines,
                "gpus_per_server": cfg.gpus_per_server,
                "links_per_pair": cfg.links_per_pair,
                "ocs_count": cfg.ocs_count,
            },
            "server_idle": list(self.server_idle),
            "gpu_owner": list(self.gpu_owner),
            "free_links": {
                repr(pos): sorted(ids) for pos, ids in sorted(
                    self.free_links.items(), key=lambda kv: repr(kv[0])
                ) if ids
            },
            "dangling": {
                repr(end): v for end, v in sorted(
                    self.dangling.items(), key=lambda kv: repr(kv[0])
                ) if v
            },
            "reserved": {str(lid): job for lid, job in sorted(self.reserved_by.items())},
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True)


def build_cluster(config: ClusterConfig) -> PhysicalCluster:
    return PhysicalCluster(config)
