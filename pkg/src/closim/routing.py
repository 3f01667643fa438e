"""Flow-to-path mapping: Source Routing, ECMP, Balanced ECMP.

Paths are tuples of hashable link keys; contention is the number of
concurrent flows sharing a key.  Cross-leaf paths always use exactly one
spine; intra-leaf (and intra-server) flows have an empty fabric path.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .patterns import CommStep, Flow


class RoutingError(Exception):
    pass


# ------------------------------------------------------------- murmur3-32

def _mm3_scalar(data: bytes, seed: int = 0) -> int:
    """MurmurHash3 x86 32-bit."""
    c1, c2 = 0xCC9E2D51, 0x1B873593
    mask = 0xFFFFFFFF
    h = seed & mask
    n_blocks = len(data) // 4
    for i in range(n_blocks):
        k = int.from_bytes(data[4 * i:4 * i + 4], "little")
        k = (k * c1) & mask
        k = ((k << 15) | (k >> 17)) & mask
        k = (k * c2) & mask
        h ^= k
        h = ((h << 13) | (h >> 19)) & mask
        h = (h * 5 + 0xE6546B64) & mask
    tail = data[4 * n_blocks:]
    k = 0
    if len(tail) >= 3:
        k ^= tail[2] << 16
    if len(tail) >= 2:
        k ^= tail[1] << 8
    if len(tail) >= 1:
        k ^= tail[0]
        k = (k * c1) & mask
        k = ((k << 15) | (k >> 17)) & mask
        k = (k * c2) & mask
        h ^= k
    h ^= len(data)
    h ^= h >> 16
    h = (h * 0x85EBCA6B) & mask
    h ^= h >> 13
    h = (h * 0xC2B2AE35) & mask
    h ^= h >> 16
    return h


def murmur3_32(data: bytes, seed: int = 0) -> int:
    return _mm3_scalar(data, seed)


def _mm3_tuple_batch(blocks: list[np.ndarray], tail16: np.ndarray) -> np.ndarray:
    """Vectorized murmur3-32 over fixed-shape inputs: full uint32 blocks
    followed by one 2-byte little-endian tail.  Matches the scalar hash of
    the equivalent byte string."""
    c1 = np.uint32(0xCC9E2D51)
    c2 = np.uint32(0x1B873593)
    h = np.zeros_like(blocks[0], dtype=np.uint32)
    with np.errstate(over="ignore"):
        for blk in blocks:
            k = blk.astype(np.uint32) * c1
            k = (k << np.uint32(15)) | (k >> np.uint32(17))
            k = k * c2
            h = h ^ k
            h = (h << np.uint32(13)) | (h >> np.uint32(19))
            h = h * np.uint32(5) + np.uint32(0xE6546B64)
        k = tail16.astype(np.uint32)  # two tail bytes, little-endian value
        k = k * c1
        k = (k << np.uint32(15)) | (k >> np.uint32(17))
        k = k * c2
        h = h ^ k
        h = h ^ np.uint32(4 * len(blocks) + 2)
        h = h ^ (h >> np.uint32(16))
        h = h * np.uint32(0x85EBCA6B)
        h = h ^ (h >> np.uint32(13))
        h = h * np.uint32(0xC2B2AE35)
        h = h ^ (h >> np.uint32(16))
    return h


# ----------------------------------------------------------- fabric views

@dataclass
class FabricView:
    """Rank-to-fabric geometry the routers work against.

    ``rank_leaf[i]`` / ``rank_port[i]`` give rank i's leaf and its port
    index within that leaf; ``rank_server`` distinguishes NVLink-local
    flows.  ``link_tag`` prefixes link keys so different allocations can
    never alias.
    """
    rank_leaf: list[int]
    rank_port: list[int]
    n_spines: int
    links_per_pair: int = 1
    rank_server: list[int] | None = None
    gpus_per_server: int = 1
    link_tag: tuple = ()

    def uplink(self, leaf: int, spine: int, lane: int = 0) -> tuple:
        return self.link_tag + ("u", leaf, spine, lane)

    def downlink(self, spine: int, leaf: int, lane: int = 0) -> tuple:
        return self.link_tag + ("d", leaf, spine, lane)

    def server_of(self, rank: int) -> int:
        if self.rank_server is not None:
            return self.rank_server[rank]
        return self.rank_leaf[rank] * 10**6 + self.rank_port[rank] // self.gpus_per_server

    def check(self, rank: int):
        if not 0 <= rank < len(self.rank_leaf):
            raise RoutingError("rank %d outside this fabric view" % rank)


def contiguous_view(n_ranks: int, gpus_per_leaf: int,
                    n_spines: int | None = None,
                    gpus_per_server: int = 1) -> FabricView:
    """Ranks laid out leaf-major: rank i on leaf i // n at port i % n."""
    return FabricView(
        rank_leaf=[i // gpus_per_leaf for i in range(n_ranks)],
        rank_port=[i % gpus_per_leaf for i in range(n_ranks)],
        n_spines=n_spines if n_spines is not None else gpus_per_leaf,
        gpus_per_server=gpus_per_server,
    )


def cluster_view(cluster, gpus: list[int], tag: tuple = ()) -> FabricView:
    """View of specific physical GPUs on a PhysicalCluster (rank order =
    list order); link keys are physical (direction, leaf, spine, lane)."""
    cfg = cluster.config
    return FabricView(
        rank_leaf=[cfg.gpu_leaf(g) for g in gpus],
        rank_port=[cfg.gpu_port(g) for g in gpus],
        n_spines=cfg.spines,
        links_per_pair=cfg.links_per_pair,
        rank_server=[cfg.gpu_server(g) for g in gpus],
        link_tag=tag,
    )


@dataclass
class RouteAssignment:
    paths: list[tuple[Flow, tuple]] = field(default_factory=list)
    link_counts: Counter = field(default_factory=Counter)

    def add(self, flow: Flow, path: tuple):
        self.paths.append((flow, path))
        for key in path:
            self.link_counts[key] += 1

    def max_contention(self) -> int:
        return max(self.link_counts.values(), default=0)


# ---------------------------------------------------------- source routing

def identity_map(view: FabricView) -> list[list[int]]:
    """Per-leaf port -> spine bijection f_m; identity modulo spine count."""
    n_leaves = max(view.rank_leaf, default=0) + 1
    ports = max(view.rank_port, default=0) + 1
    return [[p % view.n_spines for p in range(ports)] for _ in range(n_leaves)]


def source_route(step: CommStep, view: FabricView,
                 mapping: list[list[int]] | None = None) -> RouteAssignment:
    """Fixed route per source port: cross-leaf flows go via spine
    f_m(src port); intra-leaf and intra-server flows bypass the fabric."""
    if mapping is None:
        mapping = identity_map(view)
    out = RouteAssignment()
    paths = out.paths
    counts = out.link_counts
    rank_leaf = view.rank_leaf
    rank_port = view.rank_port
    n = len(rank_leaf)
    tag = view.link_tag
    for f in step.flows:
        src, dst = f.src, f.dst
        if src < 0 or src >= n or dst < 0 or dst >= n:
            view.check(src)
            view.check(dst)
        ls, ld = rank_leaf[src], rank_leaf[dst]
        if f.local or ls == ld:
            paths.append((f, ()))
            continue
        spine = mapping[ls][rank_port[src]]
        path = (tag + ("u", ls, spine, 0), tag + ("d", ld, spine, 0))
        paths.append((f, path))
        counts[path[0]] += 1
        counts[path[1]] += 1
    return out


# -------------------------------------------------------------------- ecmp

_EPHEMERAL_LO, _EPHEMERAL_HI = 32768, 60999
_DST_PORT = 4791  # RoCEv2


def _flow_ip(view: FabricView, rank: int) -> bytes:
    leaf = view.rank_leaf[rank]
    port = view.rank_port[rank]
    server = port // max(view.gpus_per_server, 1)
    return bytes([10, leaf % 256, server % 256, port % 256])


def _hash_uplink(view: FabricView, src: int, dst: int, sport: int) -> int:
    n_up = view.n_spines * view.links_per_pair
    blob = (
        _flow_ip(view, src)
        + _flow_ip(view, dst)
        + sport.to_bytes(2, "little")
        + _DST_PORT.to_bytes(2, "little")
        + n_up.to_bytes(2, "little")
    )
    return murmur3_32(blob) % n_up


def ecmp_route(step: CommStep, view: FabricView, seed: int = 0) -> RouteAssignment:
    """Hash each cross-leaf flow's 5-tuple onto an uplink; source ports
    are drawn per flow from a seeded generator."""
    rng = random.Random(seed)
    out = RouteAssignment()
    for f in step.flows:
        view.check(f.src)
        view.check(f.dst)
        ls, ld = view.rank_leaf[f.src], view.rank_leaf[f.dst]
        if f.local or ls == ld:
            out.add(f, ())
            continue
        sport = rng.randint(_EPHEMERAL_LO, _EPHEMERAL_HI)
        up = _hash_uplink(view, f.src, f.dst, sport)
        spine, lane = up % view.n_spines, up // view.n_spines
        out.add(f, (view.uplink(ls, spine, lane), view.downlink(spine, ld, lane)))
    return out


def ecmp_pair_routes(pairs: list[tuple[int, int]], view: FabricView,
                     seed: int = 0) -> dict[tuple[int, int], tuple]:
    """One hashed path per distinct (src, dst) pair, stable for the pair's
    lifetime.  Pairs are hashed in first-seen order."""
    rng = random.Random(seed)
    routes: dict[tuple[int, int], tuple] = {}
    for src, dst in pairs:
        if (src, dst) in routes:
            continue
        ls, ld = view.rank_leaf[src], view.rank_leaf[dst]
        if ls == ld:
            routes[(src, dst)] = ()
            continue
        sport = rng.randint(_EPHEMERAL_LO, _EPHEMERAL_HI)
        up = _hash_uplink(view, src, dst, sport)
        spine, lane = up % view.n_spines, up // view.n_spines
        routes[(src, dst)] = (view.uplink(ls, spine, lane),
                              view.downlink(spine, ld, lane))
    return routes


# ---------------------------------------------------------- balanced ecmp

def balanced_ecmp_route(step: CommStep, view: FabricView,
                        current_link_loads: dict | None = None,
                        seed: int = 0) -> RouteAssignment:
    """Assign each flow (in seeded-shuffled order) to a uniformly random
    spine among the source leaf's least-loaded uplinks, updating loads
    incrementally.  ``current_link_loads`` is mutated in place."""
    loads = current_link_loads if current_link_loads is not None else {}
    rng = random.Random(seed)
    order = list(range(len(step.flows)))
    rng.shuffle(order)
    assigned: dict[int, tuple] = {}
    for i in order:
        f = step.flows[i]
        view.check(f.src)
        view.check(f.dst)
        ls, ld = view.rank_leaf[f.src], view.rank_leaf[f.dst]
        if f.local or ls == ld:
            assigned[i] = ()
            continue
        candidates = [
            (spine, lane)
            for lane in range(view.links_per_pair)
            for spine in range(view.n_spines)
        ]
        best = min(loads.get(view.uplink(ls, sp, ln), 0) for sp, ln in candidates)
        pool = [c for c in candidates
                if loads.get(view.uplink(ls, c[0], c[1]), 0) == best]
        spine, lane = pool[rng.randrange(len(pool))]
        up, down = view.uplink(ls, spine, lane), view.downlink(spine, ld, lane)
        loads[up] = loads.get(up, 0) + 1
        loads[down] = loads.get(down, 0) + 1
        assigned[i] = (up, down)
    out = RouteAssignment()
    for i, f in enumerate(step.flows):
        out.add(f, assigned[i])
    return out


# --------------------------------------------------------------- reporting

def contention_report(routes: RouteAssignment) -> Counter:
    """Distribution over per-link concurrent flow counts: {count: #links}."""
    hist: Counter = Counter()
    for cnt in routes.link_counts.values():
        hist[cnt] += 1
    return hist


def flow_contention_fractions(routes: RouteAssignment) -> Counter:
    """{count: #flows whose most-contended link carries `count` flows}."""
    hist: Counter = Counter()
    for f, path in routes.paths:
        if not path:
            continue
        hist[max(routes.link_counts[k] for k in path)] += 1
    return hist


# --------------------------------------------------------- monte carlo sweep

def scale_shape(n_gpus: int) -> tuple[int, int, int]:
    """(leaves, spines, gpus_per_server) for a square-ish cluster."""
    s = 1
    while s * s < n_gpus:
        s *= 2
    while n_gpus % s != 0:
        s *= 2
    leaves = n_gpus // s
    t = 8 if s % 8 == 0 else (4 if s % 4 == 0 else 1)
    return leaves, s, t


def collision_monte_carlo(scales: list[int], trials: int, seed: int = 0,
                          batch: int = 256) -> dict[int, dict]:
    """ECMP contention distribution over random leaf-wise permutation
    steps, per cluster scale.

    Returns {scale: {"fractions": {count: flow fraction},
                     "p_contention": float}} where the fraction at count c
    is the share of cross-leaf flows whose most-loaded link carries c
    flows.  Fully vectorized over trials.
    """
    if trials < 1:
        raise RoutingError("trials must be >= 1")
    results: dict[int, dict] = {}
    for scale in scales:
        leaves, spines, _t = scale_shape(scale)
        n = spines  # ports per leaf
        rng = np.random.default_rng(seed ^ (scale * 0x9E3779B1))
        counts_hist: Counter = Counter()
        total_flows = 0
        contended = 0
        done = 0
        while done < trials:
            b = min(batch, trials - done)
            done += b
            # random leaf permutation and per-leaf port bijections
            leaf_perm = np.argsort(rng.random((b, leaves)), axis=1)
            port_perm = np.argsort(rng.random((b, leaves, n)), axis=2)
            src_leaf = np.broadcast_to(np.arange(leaves)[None, :, None], (b, leaves, n))
            src_port = np.broadcast_to(np.arange(n)[None, None, :], (b, leaves, n))
            dst_leaf = np.broadcast_to(leaf_perm[:, :, None], (b, leaves, n))
            dst_port = port_perm
            cross = dst_leaf != src_leaf

            sport = rng.integers(_EPHEMERAL_LO, _EPHEMERAL_HI + 1, size=(b, leaves, n))
            up = _hash_uplinks_batch(src_leaf, src_port, dst_leaf, dst_port,
                                     sport, n, spines)
            # up/down link ids per trial; intra-leaf flows excluded
            up_id = src_leaf * spines + up % spines
            down_id = dst_leaf * spines + up % spines
            trial_ix = np.broadcast_to(np.arange(b)[:, None, None], up_id.shape)
            n_links = leaves * spines
            flat_up = (trial_ix * n_links + up_id)[cross]
            flat_down = (trial_ix * n_links + down_id)[cross]
            up_counts = np.bincount(flat_up, minlength=b * n_links)
            down_counts = np.bincount(flat_down, minlength=b * n_links)
            per_flow = np.maximum(up_counts[flat_up], down_counts[flat_down])
            vals, cnts = np.unique(per_flow, return_counts=True)
            for v, c in zip(vals.tolist(), cnts.tolist()):
                counts_hist[v] += c
            total_flows += int(per_flow.size)
            contended += int((per_flow >= 2).sum())
        results[scale] = {
            "fractions": {v: c / total_flows for v, c in sorted(counts_hist.items())},
            "p_contention": contended / total_flows if total_flows else 0.0,
            "trials": trials,
        }
    return results


def _hash_uplinks_batch(src_leaf, src_port, dst_leaf, dst_port, sport,
                        gpus_per_leaf, spines, gpus_per_server: int = 1,
                        links_per_pair: int = 1) -> np.ndarray:
    """Vectorized 5-tuple ECMP hash, consistent with ecmp_route's layout."""
    n_up = spines * links_per_pair

    def ip_u32(leaf, port):
        server = port // max(gpus_per_server, 1)
        # bytes [10, leaf, server, port] little-endian
        return (np.uint32(10)
                + (leaf.astype(np.uint32) % 256) * np.uint32(1 << 8)
                + (server.astype(np.uint32) % 256) * np.uint32(1 << 16)
                + (port.astype(np.uint32) % 256) * np.uint32(1 << 24))

    b0 = ip_u32(src_leaf, src_port)
    b1 = ip_u32(dst_leaf, dst_port)
    b2 = (sport.astype(np.uint32)
          + np.uint32(_DST_PORT) * np.uint32(1 << 16))
    tail = np.full(src_leaf.shape, n_up, dtype=np.uint32)
    h = _mm3_tuple_batch([b0, b1, b2], tail)
    return (h % np.uint32(n_up)).astype(np.int64)
