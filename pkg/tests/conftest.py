import random

import pytest

from closim.patterns import Algo, CommSchedule


def simulate_allreduce(sched: CommSchedule, values: list[float]) -> list[float]:
    """Scalar-payload oracle: executes a schedule's chunk semantics and
    returns each rank's resulting value.

    Every rank starts with a scalar split evenly over the schedule's
    chunks.  "reduce" flows add the carried chunks into the destination,
    "copy" flows overwrite them.  A correct AllReduce ends with every
    rank holding sum(values) in every chunk.
    """
    n = sched.n_ranks
    k = sched.n_chunks
    state = [[v / k for _ in range(k)] for v in values]
    for step in sched.steps:
        if step.ordered:
            for f in step.flows:
                _apply(state, f)
        else:
            staged = [(f, [state[f.src][c] for c in f.chunks]) for f in step.flows]
            for f, payload in staged:
                for c, val in zip(f.chunks, payload):
                    if f.op == "reduce":
                        state[f.dst][c] += val
                    else:
                        state[f.dst][c] = val
    return [sum(chunks) for chunks in state]


def _apply(state, f):
    for c in f.chunks:
        if f.op == "reduce":
            state[f.dst][c] += state[f.src][c]
        else:
            state[f.dst][c] = state[f.src][c]


def random_values(n: int, seed: int = 0) -> list[float]:
    rng = random.Random(seed)
    # small integers keep float sums exact
    return [float(rng.randint(1, 97)) for _ in range(n)]


ALLREDUCE_ALGOS = (Algo.RING, Algo.HD, Algo.DBTREE)


@pytest.fixture
def tiny_cluster():
    from closim.topology import ClusterConfig, build_cluster
    return build_cluster(ClusterConfig(4, 8, 4, ocs_count=1))
