"""Size-bucketed buffer recycling.

Raw allocations are expensive: device-kind ones stall the whole accelerator
behind a sync. The pool amortizes that by recycling returned buffers.

Buckets are exact: a request matches only a cached buffer of the same
(kind, element, length). Within a bucket the most recently returned buffer is
handed out first. Leases are single-use handles; storage is materialized
lazily on first `.array` access and survives recycling, so a steady-state
run allocates nothing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .device import VirtualDevice
from .errors import UsageError


class _Buffer:
    __slots__ = ("buffer_id", "kind", "dtype", "length", "storage")

    def __init__(self, buffer_id, kind, dtype, length):
        self.buffer_id = buffer_id
        self.kind = kind
        self.dtype = dtype
        self.length = length
        self.storage = None


class BufferLease:
    """Exclusive hold on one pooled buffer until released."""

    __slots__ = ("_pool", "lease_id", "origin", "_buffer", "released")

    def __init__(self, pool, lease_id: int, origin: str, buffer: _Buffer):
        self._pool = pool
        self.lease_id = lease_id
        self.origin = origin          # "fresh" or "recycled"
        self._buffer = buffer
        self.released = False

    @property
    def kind(self) -> str:
        return self._buffer.kind

    @property
    def dtype(self):
        return self._buffer.dtype

    @property
    def length(self) -> int:
        return self._buffer.length

    @property
    def nbytes(self) -> int:
        return self._buffer.length * self._buffer.dtype.itemsize

    @property
    def array(self) -> np.ndarray:
        if self.released:
            raise UsageError(f"lease {self.lease_id} used after release")
        if self._buffer.storage is None:
            self._buffer.storage = np.empty(self._buffer.length,
                                            dtype=self._buffer.dtype)
        return self._buffer.storage

    def __repr__(self):
        state = "released" if self.released else "held"
        return (f"<lease {self.lease_id} {self.kind} "
                f"{self._buffer.dtype.name}[{self._buffer.length}] {state}>")


@dataclass(frozen=True)
class PoolStats:
    acquisitions: int
    raw_allocations: int
    reuses: int
    outstanding: int
    high_water: int
    cached: int


class BufferPool:
    """Recycles device and pinned-host buffers through exact-size buckets."""

    KINDS = ("device", "pinned_host")

    def __init__(self, device: VirtualDevice):
        self.device = device
        self._buckets: dict[tuple, list[_Buffer]] = {}
        self._leases: dict[int, BufferLease] = {}
        self._lease_seq = 0
        self._acquisitions = 0
        self._raw = 0
        self._reuses = 0
        self._high_water = 0
        self._per_bucket: dict[tuple, list] = {}   # [raw, reuses, high, out]

    def _key(self, kind: str, element, length: int) -> tuple:
        if kind not in self.KINDS:
            raise UsageError(f"unknown buffer kind {kind!r}")
        if length < 1:
            raise UsageError(f"buffer length must be >= 1, got {length}")
        return (kind, np.dtype(element), length)

    def acquire(self, kind: str, element, length: int) -> BufferLease:
        """Hand out a buffer, recycling if the exact bucket has one cached.

        A bucket miss falls through to a raw allocation, which for device
        memory stalls the accelerator behind a device-wide sync.
        """
        key = self._key(kind, element, length)
        bucket = self._buckets.setdefault(key, [])
        tally = self._per_bucket.setdefault(key, [0, 0, 0, 0])
        self._acquisitions += 1
        if bucket:
            buffer = bucket.pop()
            origin = "recycled"
            self._reuses += 1
            tally[1] += 1
        else:
            dtype = key[1]
            buffer_id = self.device.raw_alloc(kind, length * dtype.itemsize)
            buffer = _Buffer(buffer_id, kind, dtype, length)
            origin = "fresh"
            self._raw += 1
            tally[0] += 1
        self._lease_seq += 1
        lease = BufferLease(self, self._lease_seq, origin, buffer)
        self._leases[lease.lease_id] = lease
        self._high_water = max(self._high_water, len(self._leases))
        tally[3] += 1
        tally[2] = max(tally[2], tally[3])
        return lease

    def release(self, lease: BufferLease) -> None:
        if lease._pool is not self:
            raise UsageError("lease belongs to a different pool")
        if lease.released:
            raise UsageError(f"lease {lease.lease_id} released twice")
        lease.released = True
        del self._leases[lease.lease_id]
        buffer = lease._buffer
        key = (buffer.kind, buffer.dtype, buffer.length)
        self._buckets[key].append(buffer)
        self._per_bucket[key][3] -= 1

    def ensure(self, kind: str, element, length: int, count: int) -> None:
        """Grow a bucket to hold at least `count` cached buffers."""
        key = self._key(kind, element, length)
        held = [self.acquire(kind, element, length) for _ in range(count)]
        for lease in reversed(held):
            self.release(lease)

    def purge(self) -> int:
        """Drop every cached buffer; refuses while leases are outstanding."""
        if self._leases:
            ids = ", ".join(str(i) for i in sorted(self._leases))
            raise UsageError(f"cannot purge with outstanding leases: {ids}")
        dropped = sum(len(b) for b in self._buckets.values())
        self._buckets.clear()
        return dropped

    def stats(self) -> PoolStats:
        return PoolStats(
            acquisitions=self._acquisitions,
            raw_allocations=self._raw,
            reuses=self._reuses,
            outstanding=len(self._leases),
            high_water=self._high_water,
            cached=sum(len(b) for b in self._buckets.values()),
        )

    def stats_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["kind", "element", "length", "raw_allocations",
                         "reuses", "outstanding", "high_water"])
        for key in sorted(self._per_bucket,
                          key=lambda k: (k[0], k[1].name, k[2])):
            kind, dtype, length = key
            raw, reuses, high, out_count = self._per_bucket[key]
            writer.writerow([kind, dtype.name, length, raw, reuses,
                             out_count, high])
        return out.getvalue()
