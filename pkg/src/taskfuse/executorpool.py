"""Executors: persistent per-worker streams with a selection policy.

A pool of n executors owns n streams, created once up front so the
stream-creation syncs are paid before any timing window opens. n = 0 is the
host-only configuration: no device, no streams, and selecting an executor is
an error the caller must avoid by checking `cpu_only`.
"""

from __future__ import annotations

from .device import KernelSpec, VirtualDevice
from .errors import CapacityError, UsageError, ValidationError
from .sched import CompletionToken, Scheduler

MAX_EXECUTORS = 128

POLICIES = ("round_robin", "load_balanced")


class Executor:
    __slots__ = ("pool", "index", "stream_id")

    def __init__(self, pool: "ExecutorPool", index: int, stream_id: int):
        self.pool = pool
        self.index = index
        self.stream_id = stream_id

    @property
    def outstanding(self) -> int:
        return self.pool.device.outstanding(self.stream_id)

    def enqueue_kernel(self, spec: KernelSpec, body=None) -> CompletionToken:
        return self.pool.device.enqueue_kernel(self.stream_id, spec, body)

    def enqueue_copy(self, direction: str, nbytes: int) -> CompletionToken:
        return self.pool.device.enqueue_copy(self.stream_id, direction, nbytes)

    def __repr__(self):
        return f"<executor {self.index} stream={self.stream_id}>"


class ExecutorPool:
    def __init__(self, sched: Scheduler, device: VirtualDevice | None,
                 count: int, policy: str = "round_robin"):
        if count < 0:
            raise ValidationError(f"executor count must be >= 0, got {count}")
        if count > MAX_EXECUTORS:
            raise CapacityError(
                f"executor count {count} exceeds limit {MAX_EXECUTORS}")
        if policy not in POLICIES:
            raise ValidationError(
                f"unknown policy {policy!r}; expected one of {POLICIES}")
        if count > 0 and device is None:
            raise UsageError("a device is required for executor count > 0")
        self.sched = sched
        self.device = device
        self.policy = policy
        self.executors = [Executor(self, i, device.create_stream())
                          for i in range(count)]
        self._rr_next = 0

    @property
    def count(self) -> int:
        return len(self.executors)

    @property
    def cpu_only(self) -> bool:
        return not self.executors

    def select(self) -> Executor:
        """Pick an executor: cyclic, or least outstanding work (ties low)."""
        if not self.executors:
            raise UsageError("host-only pool has no executors to select")
        if self.policy == "round_robin":
            ex = self.executors[self._rr_next % len(self.executors)]
            self._rr_next += 1
            return ex
        return min(self.executors, key=lambda e: (e.outstanding, e.index))
