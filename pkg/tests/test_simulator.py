import json
import math

import numpy as np
import pytest

from closim.simulator import (
    Job,
    JobProfile,
    LoadProfile,
    SimReport,
    build_load_profile,
    communication_time,
    ideal_comm_time,
    ideal_runtime,
    iteration_time,
    job_from_json_line,
    max_min_share,
    run,
    schedule_next,
    stability,
    synthesize_trace,
    vclos_self_comm_time,
    STRATEGIES,
)
from closim.topology import ClusterConfig

MICRO_CFG = ClusterConfig(4, 8, 4, ocs_count=1)
MICRO_SIZES = (1, 2, 4, 8, 16)
MICRO_WEIGHTS = (30, 20, 20, 20, 10)


def micro_trace(count, seed, lam=40.0):
    return synthesize_trace(count, lam, seed=seed, sizes=MICRO_SIZES,
                            weights=MICRO_WEIGHTS, mean_runtime_s=300.0)


class TestIterationTime:
    def test_compute_bound(self):
        p = JobProfile("m", 8, 10, 1.0, 1e6, "ring", 0.0)
        assert iteration_time(p, 0.5) == pytest.approx(1.0)

    def test_comm_bound(self):
        p = JobProfile("m", 8, 10, 1.0, 1e6, "ring", 0.0)
        assert iteration_time(p, 3.0) == pytest.approx(3.0)

    def test_no_overlap(self):
        # alpha=1 serializes compute and communication
        p = JobProfile("m", 8, 10, 1.0, 1e6, "alltoall", 1.0)
        assert iteration_time(p, 3.0) == pytest.approx(4.0)

    def test_partial_overlap(self):
        p = JobProfile("m", 8, 10, 1.0, 1e6, "ring", 0.15)
        # 0.85 * 2.0 = 1.7 overlaps with 1.0 of compute
        assert iteration_time(p, 2.0) == pytest.approx(1.7 + 0.3)

    def test_alpha_validated(self):
        with pytest.raises(ValueError):
            JobProfile("m", 8, 10, 1.0, 1e6, "ring", 1.5)


class TestMaxMinShare:
    def test_single_flow_gets_capacity(self):
        rates = max_min_share([(("a",), 10.0)], {"a": 4.0})
        assert rates == [4.0]

    def test_two_flows_split_bottleneck(self):
        rates = max_min_share([(("a",), 10.0), (("a",), 10.0)], {"a": 4.0})
        assert rates == pytest.approx([2.0, 2.0])

    def test_small_demand_releases_share(self):
        rates = max_min_share([(("a",), 1.0), (("a",), 10.0)], {"a": 4.0})
        assert rates == pytest.approx([1.0, 3.0])

    def test_pathless_flow_gets_demand(self):
        rates = max_min_share([((), 7.0), (("a",), 10.0)], {"a": 4.0})
        assert rates == pytest.approx([7.0, 4.0])

    def test_disjoint_links_independent(self):
        rates = max_min_share([(("a",), 10.0), (("b",), 10.0)],
                              {"a": 4.0, "b": 2.0})
        assert rates == pytest.approx([4.0, 2.0])


class TestIdealTimes:
    def test_single_gpu_no_comm(self):
        p = JobProfile("m", 1, 5, 0.1, 1e9, "ring", 0.15)
        assert ideal_comm_time(p) == 0.0
        assert ideal_runtime(p) == pytest.approx(0.5)

    def test_ring_ideal(self):
        cap = 100e9 / 8
        p = JobProfile("m", 4, 1, 0.0, 1e9, "ring", 0.15)
        # 2(n-1) steps of v/n bytes each
        want = 6 * (1e9 / 4) / cap
        assert ideal_comm_time(p, cap) == pytest.approx(want)

    def test_more_gpus_not_cheaper_per_step(self):
        p4 = JobProfile("m", 4, 1, 0.0, 1e9, "alltoall", 1.0)
        p8 = JobProfile("m", 8, 1, 0.0, 1e9, "alltoall", 1.0)
        assert ideal_comm_time(p8) > 0 and ideal_comm_time(p4) > 0


class TestLoadProfiles:
    def job(self, n=8, coll="ring"):
        return Job("j0", 0.0, JobProfile("m", n, 3, 0.05, 4e8, coll, 0.15))

    def test_sr_profile_matches_ideal_when_alone(self):
        cfg = MICRO_CFG
        cap = 100e9 / 8
        job = self.job(8)
        fp = build_load_profile(job, list(range(8)), cfg, "sr", 0, cap)
        loads = np.zeros(2 * cfg.leaves * cfg.spines)
        for link, wt in fp.w.items():
            loads[link] += wt
        t = fp.comm_time(loads, cap)
        assert t >= ideal_comm_time(job.profile, cap, cfg.gpus_per_server) - 1e-12

    def test_contention_slows_job(self):
        cfg = MICRO_CFG
        cap = 100e9 / 8
        job = self.job(16, "alltoall")
        fp = build_load_profile(job, list(range(16)), cfg, "ecmp", 0, cap)
        loads = np.zeros(2 * cfg.leaves * cfg.spines)
        for link, wt in fp.w.items():
            loads[link] += wt
        alone = fp.comm_time(loads, cap)
        crowded = fp.comm_time(loads + 3, cap)
        assert crowded > alone

    def test_intra_server_job_has_no_footprint(self):
        cfg = MICRO_CFG
        job = self.job(4)
        fp = build_load_profile(job, [0, 1, 2, 3], cfg, "sr", 0, 100e9 / 8)
        assert fp.w == {}


class TestCommunicationTime:
    def test_background_contention(self):
        from closim.patterns import make_schedule
        from closim.routing import contiguous_view, source_route

        view = contiguous_view(8, 4)
        sched = make_schedule("ring", 8, 1e9)
        routes = [source_route(st, view) for st in sched.steps]
        alone = communication_time(sched, routes)
        path = next(p for _f, p in routes[0].paths if p)  # a cross-leaf flow
        # ride a heavy background flow on one of the job's links
        bg = [(path[:1], 1e30)]
        busy = communication_time(sched, routes, background=bg)
        assert busy > alone


class TestTraceSynthesis:
    def test_deterministic(self):
        a = micro_trace(50, seed=3)
        b = micro_trace(50, seed=3)
        assert [j.to_json_line() for j in a] == [j.to_json_line() for j in b]

    def test_seed_changes_trace(self):
        a = micro_trace(50, seed=3)
        b = micro_trace(50, seed=4)
        assert [j.to_json_line() for j in a] != [j.to_json_line() for j in b]

    def test_arrivals_increase(self):
        trace = micro_trace(80, seed=0)
        times = [j.arrival_time for j in trace]
        assert times == sorted(times)

    def test_json_roundtrip(self):
        for job in micro_trace(20, seed=1):
            back = job_from_json_line(job.to_json_line())
            assert back.to_json_line() == job.to_json_line()

    def test_single_gpu_jobs_have_no_alltoall(self):
        trace = synthesize_trace(300, 10.0, seed=2, sizes=(1,), weights=(1,))
        assert all(j.profile.collective == "ring" for j in trace)

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError):
            synthesize_trace(10, 0.0)


class TestSchedulers:
    def mk(self, jid, n, arrival=0.0):
        return Job(jid, arrival, JobProfile("m", n, 1, 0.1, 1e6, "ring", 0.15))

    def test_fifo_head_only(self):
        q = [self.mk("a", 8), self.mk("b", 1)]
        assert [j.job_id for j in schedule_next(q, "fifo", 0.0)] == ["a"]

    def test_ff_smallest_first(self):
        q = [self.mk("a", 8), self.mk("b", 1), self.mk("c", 4)]
        assert [j.job_id for j in schedule_next(q, "ff", 0.0)] == ["b", "c", "a"]

    def test_edf_by_deadline(self):
        q = [self.mk("a", 8), self.mk("b", 8)]
        got = schedule_next(q, "edf", 0.0, {"a": 9.0, "b": 2.0})
        assert [j.job_id for j in got] == ["b", "a"]

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            schedule_next([], "lifo", 0.0)


def overlap_usage_ok(report, num_gpus):
    """Sweep start/finish events; concurrent GPU demand never exceeds
    the cluster size."""
    events = []
    for r in report.finished():
        events.append((r.start, 1, r.n_gpus))
        events.append((r.finish, 0, -r.n_gpus))
    events.sort()
    used = 0
    for _t, _k, d in events:
        used += d
        if used > num_gpus:
            return False
    return True


class TestRunEngine:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_micro_run_all_strategies(self, strategy):
        trace = micro_trace(30, seed=5)
        rep = run(trace, MICRO_CFG, strategy, "fifo", seed=5)
        done = rep.finished()
        assert done, "no job finished under %s" % strategy
        for r in done:
            assert r.start >= r.arrival - 1e-9
            assert r.finish >= r.start
            assert r.jct == pytest.approx(r.jwt + r.jrt)
        assert overlap_usage_ok(rep, MICRO_CFG.num_gpus)

    @pytest.mark.parametrize("strategy", ["sr", "vclos", "ocs", "ecmp"])
    def test_deterministic_reruns(self, strategy):
        trace = micro_trace(25, seed=9)
        a = run(trace, MICRO_CFG, strategy, "fifo", seed=9)
        b = run(trace, MICRO_CFG, strategy, "fifo", seed=9)
        assert a.summary_json() == b.summary_json()
        for ra, rb in zip(a.jobs, b.jobs):
            assert (ra.start, ra.finish, ra.status) == (rb.start, rb.finish, rb.status)

    def test_jrt_never_beats_ideal(self):
        trace = micro_trace(25, seed=11)
        best = {r.job_id: r for r in run(trace, MICRO_CFG, "best", "fifo",
                                         seed=11).finished()}
        for strategy in ("sr", "vclos", "ecmp", "balanced"):
            rep = run(trace, MICRO_CFG, strategy, "fifo", seed=11)
            for r in rep.finished():
                if r.job_id in best:
                    assert r.jrt >= best[r.job_id].jrt - 1e-6

    def test_oversized_job_rejected(self):
        trace = micro_trace(5, seed=0)
        trace[0].profile.n_gpus = 999
        rep = run(trace, MICRO_CFG, "best", "fifo", seed=0)
        rec = [r for r in rep.jobs if r.job_id == trace[0].job_id][0]
        assert rec.status == "rejected"
        assert rep.errors

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            run(micro_trace(2, seed=0), MICRO_CFG, "magic", "fifo")

    def test_empty_trace(self):
        with pytest.raises(ValueError):
            run([], MICRO_CFG, "best", "fifo")

    def test_queue_depth_recorded(self):
        rep = run(micro_trace(20, seed=2), MICRO_CFG, "vclos", "fifo", seed=2)
        assert rep.queue_depth and all(d >= 0 for _t, d in rep.queue_depth)

    @pytest.mark.parametrize("scheduler", ["fifo", "edf", "ff"])
    def test_schedulers_complete(self, scheduler):
        trace = micro_trace(25, seed=4)
        rep = run(trace, MICRO_CFG, "vclos", scheduler, seed=4)
        assert len(rep.finished()) >= 20


class TestReports:
    def test_summary_fields(self):
        rep = run(micro_trace(15, seed=1), MICRO_CFG, "sr", "fifo", seed=1)
        s = rep.summary()
        for key in ("avg_jct", "avg_jwt", "avg_jrt", "fragmentation",
                    "stability", "max_queue_depth"):
            assert key in s
        assert s["avg_jct"] == pytest.approx(s["avg_jwt"] + s["avg_jrt"])
        json.dumps(s)  # serializable

    def test_write_csv(self, tmp_path):
        rep = run(micro_trace(10, seed=1), MICRO_CFG, "best", "fifo", seed=1)
        out = tmp_path / "jobs.csv"
        rep.write_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("job_id,")
        assert len(lines) == len(rep.jobs) + 1

    def test_stability_zero_for_singletons(self):
        rep = SimReport("best", "fifo", 0, {})
        assert stability(rep) == 0.0


class TestVclosSelfComm:
    def test_padded_grid_not_faster_than_ideal(self):
        from closim.placement import JobRequest, place
        from closim.topology import build_cluster

        cl = build_cluster(MICRO_CFG)
        alloc = place(JobRequest("j", 16), cl)
        job = Job("j", 0.0, JobProfile("m", 16, 1, 0.0, 4e8, "alltoall", 1.0))
        cap = 100e9 / 8
        t = vclos_self_comm_time(job, alloc, MICRO_CFG, cap)
        assert t >= ideal_comm_time(job.profile, cap, 4) - 1e-12
