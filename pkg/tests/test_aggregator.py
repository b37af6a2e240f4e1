"""Team formation and slice-op aggregation semantics."""

from fractions import Fraction

import numpy as np
import pytest

from taskfuse.aggregator import AggregationRegion, regions_csv
from taskfuse.bufferpool import BufferPool
from taskfuse.device import DeviceProfile, KernelSpec, VirtualDevice
from taskfuse.errors import OrderingViolationError, UsageError, ValidationError
from taskfuse.executorpool import ExecutorPool
from taskfuse.sched import Scheduler, SchedulerConfig, await_all, charge

PROF = DeviceProfile(
    cu_count=4, resident_blocks_per_cu=2, t_block=100, t_launch=10,
    t_copy_base=5, t_copy_per_byte=Fraction(1, 2),
    max_concurrent_kernels=8, concurrency_penalty=Fraction(0),
    t_device_sync=0,
)


class Rig:
    def __init__(self, max_team, executors=1, workers=32, record_events=False):
        self.sched = Scheduler(SchedulerConfig(worker_count=workers,
                                               trace_occupancy=True))
        self.device = VirtualDevice(self.sched, PROF,
                                    record_events=record_events)
        self.pool = ExecutorPool(self.sched, self.device, executors)
        self.buffers = BufferPool(self.device)
        self.region = AggregationRegion(self.sched, self.pool, self.buffers,
                                        "r", max_team)
        self.out = {}

    def prime_stream(self, index=0, wf=1):
        # park real work on a stream so arrivals find it busy
        self.device.enqueue_kernel(
            self.pool.executors[index].stream_id,
            KernelSpec("prime", blocks=1, work_factor=Fraction(wf)))

    def full_visit(self, name, delay=0, length=4, bps=2):
        def body():
            if delay:
                yield charge(delay)
            member = yield self.region.enter()
            self.out[name] = member
            member.slice_alloc("pinned_host", "f8", length)
            member.slice_alloc("device", "f8", length)
            member.slice_copy("h2d", length * 8)
            self.out[name, "launch"] = member.slice_launch(
                "fused", bps, Fraction(1))
            d2h = member.slice_copy("d2h", length * 8)
            yield await_all(d2h)
            member.leave()
        return body


def test_cap_one_teams_never_suspend():
    rig = Rig(max_team=1)

    def solo(i):
        def body():
            member = yield rig.region.enter()
            member.slice_launch("fused", 2, Fraction(1))
            member.leave()
            rig.out[i] = member.team_size
        return body

    for i in range(3):
        rig.sched.spawn(solo(i))
    rig.sched.run()
    assert rig.out == {0: 1, 1: 1, 2: 1}
    assert rig.region.stats().size_histogram == {1: 3}
    assert rig.device.kernels_enqueued == 3
    # formation never parked anybody
    assert not any(e[2] == "suspend" for e in rig.sched.occupancy_log)


def test_all_three_close_paths_in_one_run():
    rig = Rig(max_team=2)
    for i in range(4):
        rig.sched.spawn(rig.full_visit(i))
    rig.sched.run()

    s = rig.region.stats()
    # arrival 0 runs alone (stream idle), 1+2 close at the cap,
    # 3 forms alone and closes when the stream drains
    assert s.teams_formed == 3
    assert s.size_histogram == {1: 2, 2: 1}
    assert s.solo_fast_path == 1
    assert s.violations == 0
    assert rig.device.kernels_enqueued == 3
    assert rig.device.copies_enqueued == 6
    # 32-byte slices: 2 solo visits + 1 pair, h2d and d2h each
    assert rig.device.bytes_copied == 2 * (32 + 32) + (64 + 64)
    # pinned + device pairs: 2 fresh for the solo, 2 fresh for the pair,
    # the drain-closed solo recycles the first solo's buffers
    ps = rig.buffers.stats()
    assert ps.raw_allocations == 4
    assert ps.reuses == 2
    assert ps.outstanding == 0


def test_stream_drain_closes_team_and_fuses_ops():
    rig = Rig(max_team=8)
    rig.sched.spawn(rig.full_visit("a"))
    rig.sched.spawn(rig.full_visit("b", delay=5))
    rig.sched.spawn(rig.full_visit("c", delay=6))
    rig.sched.run()

    assert rig.region.stats().size_histogram == {1: 1, 2: 1}
    # b and c share one team, one fused kernel, one proxy token
    assert rig.out["b", "launch"] is rig.out["c", "launch"]
    assert rig.out["b"].team is rig.out["c"].team
    assert (rig.out["b"].slice_id, rig.out["c"].slice_id) == (0, 1)


def test_team_of_16_launches_one_wide_kernel():
    rig = Rig(max_team=16, record_events=True)
    rig.prime_stream()
    for i in range(16):
        rig.sched.spawn(rig.full_visit(i, bps=8))
    rig.sched.run()

    assert rig.region.stats().size_histogram == {16: 1}
    assert rig.device.kernels_enqueued == 2      # the primer and the fused one
    fused = [e for e in rig.device.events
             if e[1] == "kernel_start" and e[3] == "fused"]
    assert len(fused) == 1
    assert fused[0][4] == 128                    # 16 slices * 8 blocks
    assert fused[0][5] == 16
    # one aggregated transfer each way for the whole team
    assert rig.device.copies_enqueued == 2
    assert rig.device.bytes_copied == 2 * 16 * 32


def test_parents_round_robin_over_executors():
    rig = Rig(max_team=2, executors=2, record_events=True)
    rig.prime_stream(0)
    rig.prime_stream(1)
    for i in range(4):
        rig.sched.spawn(rig.full_visit(i))
    rig.sched.run()

    # arrivals 0,2 pair on parent 0; arrivals 1,3 pair on parent 1
    assert rig.region.stats().size_histogram == {2: 2}
    fused_streams = {e[2] for e in rig.device.events
                     if e[1] == "kernel_start" and e[3] == "fused"}
    assert fused_streams == {0, 1}


def test_chunk_views_partition_one_buffer():
    rig = Rig(max_team=2)
    rig.prime_stream()
    joint = {}

    def writer(i):
        def body():
            member = yield rig.region.enter()
            view = member.slice_alloc("device", "f8", 4)
            assert view.length == 4
            assert view.nbytes == 32
            view.array[:] = member.slice_id + 7
            # the cap-closing member (slice 1) runs first, inline; the parked
            # opener (slice 0) resumes after it, so it sees the whole buffer
            if member.slice_id == 0:
                assert view._step.lease.length == 8
                joint["all"] = view._step.lease.array.copy()
            member.leave()
        return body

    rig.sched.spawn(writer(0))
    rig.sched.spawn(writer(1))
    rig.sched.run()
    np.testing.assert_array_equal(
        joint["all"], [7, 7, 7, 7, 8, 8, 8, 8])


def test_signature_mismatch_is_an_ordering_violation():
    rig = Rig(max_team=2)
    rig.prime_stream()

    def visitor(length):
        def body():
            member = yield rig.region.enter()
            member.slice_alloc("device", "f8", length)
            member.leave()
        return body

    rig.sched.spawn(visitor(4))
    rig.sched.spawn(visitor(5))
    with pytest.raises(OrderingViolationError) as exc:
        rig.sched.run()
    err = exc.value
    assert err.region == "r"
    assert err.sequence == 0
    assert {err.expected, err.got} == {"alloc:device:<f8:4",
                                       "alloc:device:<f8:5"}
    assert rig.region.stats().violations == 1


def test_leaving_before_teammates_finish_is_a_violation():
    rig = Rig(max_team=2)
    rig.prime_stream()

    def short():
        member = yield rig.region.enter()
        member.slice_alloc("device", "f8", 4)
        member.leave()

    def long():
        member = yield rig.region.enter()
        member.slice_alloc("device", "f8", 4)
        member.slice_copy("h2d", 32)
        member.leave()

    rig.sched.spawn(short)
    rig.sched.spawn(long)
    with pytest.raises(OrderingViolationError) as exc:
        rig.sched.run()
    # whichever member acts second diverges from the recorded sequence
    assert {exc.value.expected, exc.value.got} >= {"leave"}


def test_double_leave_and_use_after_leave():
    rig = Rig(max_team=1)
    caught = {}

    def body():
        member = yield rig.region.enter()
        member.leave()
        try:
            member.leave()
        except UsageError as err:
            caught["double"] = str(err)
        try:
            member.slice_copy("h2d", 8)
        except UsageError as err:
            caught["after"] = str(err)

    rig.sched.spawn(body)
    rig.sched.run()
    assert "left twice" in caught["double"]
    assert "after leave" in caught["after"]


def test_nested_region_visits_are_rejected():
    rig = Rig(max_team=1)
    other = AggregationRegion(rig.sched, rig.pool, rig.buffers, "r2", 1)

    def body():
        yield rig.region.enter()
        yield other.enter()

    rig.sched.spawn(body)
    with pytest.raises(UsageError, match="already inside"):
        rig.sched.run()


def test_enter_outside_a_task_is_rejected():
    rig = Rig(max_team=1)
    with pytest.raises(UsageError, match="outside any task"):
        rig.region.enter()


def test_region_parameter_validation():
    rig = Rig(max_team=1)
    with pytest.raises(ValidationError):
        AggregationRegion(rig.sched, rig.pool, rig.buffers, "bad", 0)
    with pytest.raises(ValidationError):
        AggregationRegion(rig.sched, rig.pool, rig.buffers, "bad", 129)
    host_only = ExecutorPool(rig.sched, None, 0)
    with pytest.raises(UsageError, match="at least one executor"):
        AggregationRegion(rig.sched, host_only, rig.buffers, "bad", 2)


def test_team_sizes_never_exceed_cap():
    rig = Rig(max_team=4)
    for i in range(20):
        rig.sched.spawn(rig.full_visit(i, delay=(i * 7) % 40))
    rig.sched.run()
    s = rig.region.stats()
    assert all(size <= 4 for size in s.size_histogram)
    assert sum(size * n for size, n in s.size_histogram.items()) == 20
    assert sum(s.size_histogram.values()) == s.teams_formed
    assert rig.buffers.stats().outstanding == 0


def test_forming_members_release_their_workers():
    rig = Rig(max_team=8, workers=1)
    rig.sched.spawn(rig.full_visit("a"))          # takes the stream
    rig.sched.spawn(rig.full_visit("b", delay=1))  # forms, parks, frees worker

    def bystander():
        yield charge(50)
    _, tok = rig.sched.spawn(bystander)

    rig.sched.run()
    # on a single worker the bystander can only finish at 51 if the forming
    # member gave the worker back while parked
    assert tok.ready_at == 51
    assert any(e[2] == "suspend" for e in rig.sched.occupancy_log)


def test_region_stats_csv():
    rig = Rig(max_team=2)
    for i in range(4):
        rig.sched.spawn(rig.full_visit(i))
    rig.sched.run()
    text = regions_csv([rig.region])
    lines = text.strip().splitlines()
    assert lines[0] == ("region,max_team,teams_formed,violations,"
                        "solo_fast_path,team_sizes")
    assert lines[1] == "r,2,3,0,1,1:2 2:1"
