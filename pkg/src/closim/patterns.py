"""Per-iteration communication schedules for collective algorithms.

Each generator returns a :class:`CommSchedule` whose steps carry
(src rank, dst rank, bytes) flows.  Flows also carry chunk-level payload
semantics ("reduce" accumulates the listed chunks into the destination,
"copy" overwrites them) so a scalar-payload oracle can verify that an
AllReduce schedule actually computes the global sum.

Ranks map to physical GPUs contiguously (rank i on leaf floor(i/n) for
n GPUs per leaf); the placement layer guarantees that contiguity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class PatternError(Exception):
    pass


class Algo(str, Enum):
    RING = "ring"
    HIER_RING = "hier_ring"
    HD = "hd"
    ALLTOALL = "alltoall"
    PIPELINE = "pipeline"
    DBTREE = "dbtree"


@dataclass(frozen=True)
class Flow:
    src: int
    dst: int
    nbytes: float
    op: str = "copy"                 # "reduce" | "copy"
    chunks: tuple = ()               # chunk ids this flow carries
    local: bool = False              # intra-server (NVLink), fabric-exempt


@dataclass
class CommStep:
    flows: list[Flow]
    index: int
    # tree schedules apply flows in list order (dependencies), others
    # apply all flows of a step simultaneously
    ordered: bool = False


@dataclass
class CommSchedule:
    steps: list[CommStep]
    algo: Algo
    n_ranks: int
    data_bytes: float
    n_chunks: int = 1

    def to_json_lines(self) -> list[str]:
        import json
        out = []
        for st in self.steps:
            out.append(json.dumps({
                "step": st.index,
                "flows": [
                    {"src": f.src, "dst": f.dst, "bytes": f.nbytes,
                     "op": f.op, "local": f.local}
                    for f in st.flows
                ],
            }, sort_keys=True))
        return out


def _require(cond: bool, msg: str):
    if not cond:
        raise PatternError(msg)


# --------------------------------------------------------------------- ring

def ring_steps(n_ranks: int, data_bytes: float) -> CommSchedule:
    """Ring AllReduce: N-1 scatter-reduce rounds then N-1 all-gather rounds.

    In round t of scatter-reduce, rank i sends its ((i - t) mod N)-th chunk
    to rank (i + 1) mod N; all-gather reuses the ring with chunk
    (i + 1 - t) mod N.
    """
    n = n_ranks
    _require(n >= 2, "ring needs at least 2 ranks")
    chunk = data_bytes / n
    steps = []
    idx = 0
    for t in range(n - 1):
        flows = [
            Flow(i, (i + 1) % n, chunk, op="reduce", chunks=((i - t) % n,))
            for i in range(n)
        ]
        steps.append(CommStep(flows, idx))
        idx += 1
    for t in range(n - 1):
        flows = [
            Flow(i, (i + 1) % n, chunk, op="copy", chunks=((i + 1 - t) % n,))
            for i in range(n)
        ]
        steps.append(CommStep(flows, idx))
        idx += 1
    return CommSchedule(steps, Algo.RING, n, data_bytes, n_chunks=n)


# ----------------------------------------------------------------------- hd

def hd_steps(n_ranks: int, data_bytes: float) -> CommSchedule:
    """Recursive halving-doubling AllReduce.

    Power-of-two core: reduce-scatter step t pairs rank i with i xor 2^t,
    halving the communicated data each step; all-gather mirrors in
    reverse.  For other N, ranks i in 0..N-M-1 (M the largest power of
    two <= N) absorb rank i+M in a pre-step and fan back out at the end.
    """
    n = n_ranks
    _require(n >= 2, "hd needs at least 2 ranks")
    m = 1 << (n.bit_length() - 1)
    if m == n:
        core = n
        extra = 0
    else:
        core = m
        extra = n - m
    p = core.bit_length() - 1
    n_chunks = core
    chunk_bytes = data_bytes / n_chunks
    steps = []
    idx = 0

    if extra:
        flows = [
            Flow(i + core, i, data_bytes, op="reduce", chunks=tuple(range(n_chunks)))
            for i in range(extra)
        ]
        steps.append(CommStep(flows, idx))
        idx += 1

    # reduce-scatter: after step t, rank i is responsible for chunks whose
    # low bits 0..t match i's
    for t in range(p):
        flows = []
        for i in range(core):
            peer = i ^ (1 << t)
            sent = tuple(
                c for c in range(n_chunks)
                if all(((c >> b) & 1) == ((i >> b) & 1) for b in range(t))
                and ((c >> t) & 1) == ((peer >> t) & 1)
            )
            flows.append(Flow(i, peer, chunk_bytes * len(sent), op="reduce", chunks=sent))
        steps.append(CommStep(flows, idx))
        idx += 1

    # all-gather mirrors in reverse order
    for t in reversed(range(p)):
        flows = []
        for i in range(core):
            peer = i ^ (1 << t)
            held = tuple(
                c for c in range(n_chunks)
                if all(((c >> b) & 1) == ((i >> b) & 1) for b in range(t + 1))
            )
            flows.append(Flow(i, peer, chunk_bytes * len(held), op="copy", chunks=held))
        steps.append(CommStep(flows, idx))
        idx += 1

    if extra:
        flows = [
            Flow(i, i + core, data_bytes, op="copy", chunks=tuple(range(n_chunks)))
            for i in range(extra)
        ]
        steps.append(CommStep(flows, idx))
        idx += 1

    return CommSchedule(steps, Algo.HD, n, data_bytes, n_chunks=n_chunks)


# -------------------------------------------------------- hierarchical ring

def hierarchical_ring_steps(n_ranks: int, ranks_per_server: int,
                            data_bytes: float) -> CommSchedule:
    """Three phases: NVLink-local reduce to one representative per server,
    ring AllReduce across representatives, local broadcast back."""
    n, t_ = n_ranks, ranks_per_server
    _require(n >= 1 and t_ >= 1, "bad rank counts")
    _require(n % t_ == 0, "ranks_per_server must divide n_ranks")
    n_servers = n // t_
    steps = []
    idx = 0
    n_chunks = max(n_servers, 1)
    all_chunks = tuple(range(n_chunks))

    for j in range(1, t_):
        flows = [
            Flow(base + j, base, data_bytes, op="reduce", chunks=all_chunks, local=True)
            for base in range(0, n, t_)
        ]
        steps.append(CommStep(flows, idx))
        idx += 1

    if n_servers >= 2:
        inner = ring_steps(n_servers, data_bytes)
        for st in inner.steps:
            flows = [
                Flow(f.src * t_, f.dst * t_, f.nbytes, op=f.op, chunks=f.chunks)
                for f in st.flows
            ]
            steps.append(CommStep(flows, idx))
            idx += 1

    for j in range(1, t_):
        flows = [
            Flow(base, base + j, data_bytes, op="copy", chunks=all_chunks, local=True)
            for base in range(0, n, t_)
        ]
        steps.append(CommStep(flows, idx))
        idx += 1

    return CommSchedule(steps, Algo.HIER_RING, n, data_bytes, n_chunks=n_chunks)


# ------------------------------------------------------------------ alltoall

def alltoall_steps(n_ranks: int, data_bytes: float) -> CommSchedule:
    """Pairwise AlltoAll: N-1 steps, step t sends i -> (i + t + 1) mod N."""
    n = n_ranks
    _require(n >= 2, "alltoall needs at least 2 ranks")
    per = data_bytes / n
    steps = []
    for t in range(n - 1):
        flows = [Flow(i, (i + t + 1) % n, per) for i in range(n)]
        steps.append(CommStep(flows, t))
    return CommSchedule(steps, Algo.ALLTOALL, n, data_bytes)


# ------------------------------------------------------------------ pipeline

def pipeline_steps(n_ranks: int, data_bytes: float) -> CommSchedule:
    """Forward step i -> i+1, backward step i -> i-1."""
    n = n_ranks
    _require(n >= 2, "pipeline needs at least 2 ranks")
    fwd = [Flow(i, i + 1, data_bytes) for i in range(n - 1)]
    bwd = [Flow(i, i - 1, data_bytes) for i in range(1, n)]
    return CommSchedule([CommStep(fwd, 0), CommStep(bwd, 1)],
                        Algo.PIPELINE, n, data_bytes)


# --------------------------------------------------------- double binary tree

def _inorder_tree(n: int) -> dict[int, int]:
    """Parent map (0-indexed) of the balanced in-order binary tree.

    Built over 1-indexed ranks: the root of an interval is the element
    with the largest power-of-two alignment, so odd 1-indexed ranks (even
    0-indexed) are the leaves.
    """
    parent: dict[int, int] = {}

    def build(lo: int, hi: int, par: int | None):
        if lo > hi:
            return
        root = max(range(lo, hi + 1), key=lambda v: (v & -v, -v))
        if par is not None:
            parent[root - 1] = par - 1
        build(lo, root - 1, root)
        build(root + 1, hi, root)

    build(1, n, None)
    return parent


def double_binary_tree_steps(n_ranks: int, data_bytes: float) -> CommSchedule:
    """Two complementary binary trees, each moving half the data.

    Tree B is tree A with every rank shifted by one (mod N), so each rank
    is a leaf in exactly one tree when N is even.  The schedule has a
    reduce-up step and a broadcast-down step; within each step flows are
    listed leaves-first (dependency order).
    """
    n = n_ranks
    _require(n >= 2, "double binary tree needs at least 2 ranks")
    half = data_bytes / 2.0
    parent_a = _inorder_tree(n)
    trees = [
        {child: par for child, par in parent_a.items()},
        {(child + 1) % n: (par + 1) % n for child, par in parent_a.items()},
    ]

    def depth(tree, node):
        d = 0
        while node in tree:
            node = tree[node]
            d += 1
        return d

    reduce_flows = []
    bcast_flows = []
    for ci, tree in enumerate(trees):
        order = sorted(tree.items(), key=lambda cp: (-depth(tree, cp[0]), cp[0]))
        for child, par in order:
            reduce_flows.append(Flow(child, par, half, op="reduce", chunks=(ci,)))
        for child, par in reversed(order):
            bcast_flows.append(Flow(par, child, half, op="copy", chunks=(ci,)))
    steps = [CommStep(reduce_flows, 0, ordered=True),
             CommStep(bcast_flows, 1, ordered=True)]
    return CommSchedule(steps, Algo.DBTREE, n, data_bytes, n_chunks=2)


GENERATORS = {
    Algo.RING: ring_steps,
    Algo.HD: hd_steps,
    Algo.ALLTOALL: alltoall_steps,
    Algo.PIPELINE: pipeline_steps,
    Algo.DBTREE: double_binary_tree_steps,
}


def make_schedule(algo, n_ranks: int, data_bytes: float,
                  ranks_per_server: int | None = None) -> CommSchedule:
    algo = Algo(algo)
    if algo is Algo.HIER_RING:
        if ranks_per_server is None or n_ranks % ranks_per_server != 0:
            ranks_per_server = 1
        return hierarchical_ring_steps(n_ranks, ranks_per_server, data_bytes)
    return GENERATORS[algo](n_ranks, data_bytes)


# ------------------------------------------------------------ leaf-wise check

def is_leafwise_permutation(step: CommStep, gpu_to_leaf: dict[int, int]) -> bool:
    """True iff the step is a (partial) permutation on ranks whose induced
    cross-leaf traffic is a (partial) permutation on leaves."""
    src_seen: set[int] = set()
    dst_seen: set[int] = set()
    leaf_src: dict[int, int] = {}
    leaf_dst: dict[int, int] = {}
    for f in step.flows:
        if f.src not in gpu_to_leaf or f.dst not in gpu_to_leaf:
            raise PatternError("flow endpoint not covered by leaf mapping")
        if f.src in src_seen or f.dst in dst_seen:
            return False
        src_seen.add(f.src)
        dst_seen.add(f.dst)
        ls, ld = gpu_to_leaf[f.src], gpu_to_leaf[f.dst]
        if ls == ld:
            continue
        if ls in leaf_src and leaf_src[ls] != ld:
            return False
        if ld in leaf_dst and leaf_dst[ld] != ls:
            return False
        leaf_src[ls] = ld
        leaf_dst[ld] = ls
    return True
