"""Work aggregation: many tasks' slices fused into single device operations.

A region guards one call-site (one kernel plus its staging traffic). Tasks
entering the region are grouped into teams; every member then issues the
same sequence of slice operations, and the region coalesces them:

* slice_alloc: one pooled buffer of team_size slices, each member holding a
  contiguous chunk view,
* slice_copy: one transfer of team_size * bytes_per_slice,
* slice_launch: one kernel of team_size * blocks_per_slice blocks, paying a
  single launch overhead.

Team formation is demand-driven. An arrival finding its parent's stream idle
and no team forming runs alone immediately (the device is starving; waiting
would only add latency). Otherwise it joins the forming team, which closes
either when the stream drains or when the team reaches max_team, whichever
comes first. Arrivals are spread over parents round-robin; each parent is
pinned to one executor of the pool.

Members of one team must issue identical operation sequences; the region
validates each step against what the first member recorded and raises
OrderingViolationError on any divergence, including leaving early or late.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable
from zlib import crc32

import numpy as np

from .bufferpool import BufferPool
from .device import KernelSpec
from .errors import OrderingViolationError, UsageError, ValidationError
from .executorpool import ExecutorPool
from .sched import Park, Scheduler

MAX_TEAM = 128


class SliceView:
    """One member's chunk of a team buffer; storage materializes on access."""

    __slots__ = ("_step", "offset", "length")

    def __init__(self, step, offset: int, length: int):
        self._step = step
        self.offset = offset
        self.length = length

    @property
    def array(self) -> np.ndarray:
        return self._step.lease.array[self.offset:self.offset + self.length]

    @property
    def nbytes(self) -> int:
        return self.length * self._step.lease.dtype.itemsize


class _Step:
    __slots__ = ("signature", "arrivals", "proxy", "lease")

    def __init__(self, signature: tuple):
        self.signature = signature
        self.arrivals = 0
        self.proxy = None
        self.lease = None


class _Team:
    __slots__ = ("region", "parent", "members", "state", "size", "steps",
                 "final_cursor", "left", "pending_ops", "cancel_watch",
                 "released")

    def __init__(self, region, parent):
        self.region = region
        self.parent = parent
        self.members: list[TeamMember] = []
        self.state = "forming"
        self.size = 0
        self.steps: list[_Step] = []
        self.final_cursor: int | None = None
        self.left = 0
        self.pending_ops = 0
        self.cancel_watch: Callable[[], None] | None = None
        self.released = False


class _Parent:
    __slots__ = ("index", "executor", "forming")

    def __init__(self, index, executor):
        self.index = index
        self.executor = executor
        self.forming: _Team | None = None


class TeamMember:
    """A task's handle on its slice within one region visit."""

    __slots__ = ("team", "slice_id", "cursor", "formation", "_task", "left")

    def __init__(self, team: _Team, slice_id: int, formation, task):
        self.team = team
        self.slice_id = slice_id
        self.cursor = 0
        self.formation = formation
        self._task = task
        self.left = False

    @property
    def team_size(self) -> int:
        return self.team.size

    # -- slice operations ------------------------------------------------

    def slice_alloc(self, kind: str, element, length: int) -> SliceView:
        """Per-member chunk of one pooled buffer sized for the whole team."""
        dtype = np.dtype(element)
        step = self._issue(("alloc", kind, dtype.str, length))
        if step.lease is None:
            step.lease = self.team.region.buffers.acquire(
                kind, dtype, length * self.team.size)
        return SliceView(step, self.slice_id * length, length)

    def slice_copy(self, direction: str, bytes_per_slice: int):
        """Contribute to one aggregated transfer; token fires when it lands."""
        step = self._issue(("copy", direction, bytes_per_slice))
        region = self.team.region
        if step.proxy is None:
            step.proxy = region.sched.new_token(
                f"{region.name}:copy:{direction}")
        if step.arrivals == self.team.size:
            token = self.team.parent.executor.enqueue_copy(
                direction, bytes_per_slice * self.team.size)
            self._chain(step, token)
        return step.proxy

    def slice_launch(self, kernel_id: str, blocks_per_slice: int,
                     work_factor: Fraction, body: Callable[[], None] | None = None):
        """Contribute one slice to the team's single fused kernel.

        The functional payload runs now, at issue time; the fused kernel is
        enqueued once, by the last member to reach this step.
        """
        step = self._issue(("launch", kernel_id, blocks_per_slice,
                            work_factor))
        if body is not None:
            body()
        region = self.team.region
        if step.proxy is None:
            step.proxy = region.sched.new_token(f"{region.name}:launch")
        if step.arrivals == self.team.size:
            spec = KernelSpec(
                kernel_id=kernel_id,
                blocks=blocks_per_slice * self.team.size,
                work_factor=work_factor,
                slice_count=self.team.size,
            )
            token = self.team.parent.executor.enqueue_kernel(spec)
            self._chain(step, token)
        return step.proxy

    def leave(self) -> None:
        """Finish the visit; teammate sequences must end at the same step."""
        if self.left:
            raise UsageError(
                f"member {self.slice_id} of region {self.team.region.name!r} "
                f"left twice")
        team = self.team
        if len(team.steps) > self.cursor:
            self._violation(team.steps[self.cursor].signature, ("leave",))
        team.final_cursor = self.cursor
        self.left = True
        team.left += 1
        if self._task is not None:
            self._task.active_slice = None
        _maybe_release(team)

    # -- internals ---------------------------------------------------------

    def _issue(self, signature: tuple) -> _Step:
        if self.left:
            raise UsageError(
                f"member {self.slice_id} of region {self.team.region.name!r} "
                f"used after leave")
        team = self.team
        k = self.cursor
        if team.final_cursor is not None and k >= team.final_cursor:
            self._violation(("leave",), signature)
        if k < len(team.steps):
            step = team.steps[k]
            if step.signature != signature:
                self._violation(step.signature, signature)
        else:
            step = _Step(signature)
            team.steps.append(step)
        step.arrivals += 1
        self.cursor += 1
        return step

    def _chain(self, step: _Step, device_token) -> None:
        team = self.team
        team.pending_ops += 1
        proxy = step.proxy

        def on_done(t):
            proxy.fire(t)
            team.pending_ops -= 1
            _maybe_release(team)
        device_token.on_ready(on_done)

    def _violation(self, expected, got):
        region = self.team.region
        region.violations += 1
        raise OrderingViolationError(
            region.name, self.cursor, _fmt_sig(expected), _fmt_sig(got))


def _fmt_sig(sig) -> str:
    return ":".join(str(p) for p in sig)


def _maybe_release(team: _Team) -> None:
    if team.released or team.left < team.size or team.pending_ops > 0:
        return
    team.released = True
    for step in team.steps:
        if step.lease is not None:
            team.region.buffers.release(step.lease)


@dataclass(frozen=True)
class RegionStats:
    name: str
    max_team: int
    teams_formed: int
    violations: int
    solo_fast_path: int
    size_histogram: dict


class AggregationRegion:
    """One aggregation call-site bound to an executor pool."""

    def __init__(self, sched: Scheduler, pool: ExecutorPool,
                 buffers: BufferPool, name: str, max_team: int = 1,
                 parent_count: int | None = None):
        if not 1 <= max_team <= MAX_TEAM:
            raise ValidationError(
                f"max_team must be in 1..{MAX_TEAM}, got {max_team}")
        if pool.cpu_only:
            raise UsageError(
                f"region {name!r} needs at least one executor")
        if parent_count is None:
            parent_count = len(pool.executors)
        if parent_count < 1:
            raise ValidationError(
                f"region {name!r} needs at least one parent, "
                f"got {parent_count}")
        self.sched = sched
        self.pool = pool
        self.buffers = buffers
        self.name = name
        self.max_team = max_team
        # Round-robin over the pool, led by a name-derived executor: regions
        # created together must not all convoy on executor 0. With more
        # parents than executors, parents share streams.
        lead = crc32(name.encode()) % len(pool.executors)
        self.parents = [
            _Parent(i, pool.executors[(lead + i) % len(pool.executors)])
            for i in range(parent_count)
        ]
        self._arrivals = 0
        self.teams_formed = 0
        self.violations = 0
        self.solo_fast_path = 0
        self.size_histogram: dict[int, int] = {}

    def enter(self) -> Park:
        """Command for task bodies: `member = yield region.enter()`.

        Joins (or opens, or instantly closes) a team on the arrival's parent.
        The task suspends only if its team keeps forming.
        """
        task = self.sched._current
        if task is None:
            raise UsageError(
                f"region {self.name!r} entered outside any task")
        if task.active_slice is not None:
            raise UsageError(
                f"task {task.label!r} entered region {self.name!r} while "
                f"already inside region visit {task.active_slice!r}")
        parent = self.parents[self._arrivals % len(self.parents)]
        self._arrivals += 1

        team = parent.forming
        if team is None:
            team = _Team(self, parent)
        member = TeamMember(
            team, len(team.members),
            self.sched.new_token(f"{self.name}:join"), task)
        team.members.append(member)
        task.active_slice = f"{self.name}#{member.slice_id}"

        if len(team.members) >= self.max_team:
            # cap reached (max_team 1 closes instantly, never suspending)
            if parent.forming is team:
                parent.forming = None
            self._close(team)
        elif parent.forming is None:
            device = self.pool.device
            if not device.stream_busy(parent.executor.stream_id):
                # device is starving: run alone rather than wait
                self.solo_fast_path += 1
                self._close(team)
            else:
                parent.forming = team
                team.cancel_watch = device.watch_stream_idle(
                    parent.executor.stream_id,
                    lambda t, team=team: self._close_if_forming(team))
        return Park(member.formation, lambda m=member: m)

    def _close_if_forming(self, team: _Team) -> None:
        if team.state == "forming":
            if team.parent.forming is team:
                team.parent.forming = None
            self._close(team)

    def _close(self, team: _Team) -> None:
        team.state = "closed"
        team.size = len(team.members)
        if team.cancel_watch is not None:
            team.cancel_watch()
            team.cancel_watch = None
        self.teams_formed += 1
        self.size_histogram[team.size] = \
            self.size_histogram.get(team.size, 0) + 1
        now = self.sched.now
        for member in team.members:
            member.formation.fire(now)

    def stats(self) -> RegionStats:
        return RegionStats(
            name=self.name,
            max_team=self.max_team,
            teams_formed=self.teams_formed,
            violations=self.violations,
            solo_fast_path=self.solo_fast_path,
            size_histogram=dict(sorted(self.size_histogram.items())),
        )


def regions_csv(regions) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["region", "max_team", "teams_formed", "violations",
                     "solo_fast_path", "team_sizes"])
    for region in regions:
        s = region.stats()
        sizes = " ".join(f"{k}:{v}" for k, v in s.size_histogram.items())
        writer.writerow([s.name, s.max_team, s.teams_formed, s.violations,
                         s.solo_fast_path, sizes])
    return out.getvalue()
