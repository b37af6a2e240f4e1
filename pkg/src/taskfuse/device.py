"""Discrete-event model of a stream-ordered accelerator.

The device shares the scheduler's virtual clock. Work arrives on in-order
streams; kernels additionally contend for three device-wide resources:

* block slots: cu_count * resident_blocks_per_cu concurrent thread blocks,
  filled greedily in event order,
* a concurrency limit: at most max_concurrent_kernels kernels between their
  launch begin and their last block retiring,
* the launch lane: one kernel at a time pays its launch overhead
  t_launch * (1 + kappa * busy_streams); only after that do its blocks become
  dispatchable. The lane is what makes many small launches more expensive
  than one large one even when streams are plentiful.

busy_streams counts streams other than the launching one that have
enqueued-but-unfinished work, so a solo launch is unaffected by kappa.

Copies occupy only their stream: duration t_copy_base + bytes * t_copy_per_byte.

Device-wide syncs (raw device allocations, stream creation) drain everything
enqueued before them, take t_device_sync, and gate everything enqueued after
them, on every stream.

Functional and timing concerns are separated: a kernel's body runs eagerly at
enqueue time, so field results never depend on the profile. All durations are
integer ticks; rational profile entries use Fraction, keeping event ordering
exact.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from .errors import CapacityError, ParseError, UsageError, ValidationError
from .sched import CompletionToken, Scheduler, VirtualTime

MAX_STREAMS = 128
THREADS_PER_BLOCK = 128

StreamId = int
BufferId = int

EVENT_KINDS = (
    "kernel_start", "block_retire", "kernel_end", "copy_end",
    "sync_begin", "sync_end",
)


@dataclass(frozen=True)
class DeviceProfile:
    """Timing parameters of one virtual accelerator."""

    cu_count: int
    resident_blocks_per_cu: int
    t_block: int
    t_launch: int
    t_copy_base: int
    t_copy_per_byte: Fraction
    max_concurrent_kernels: int
    concurrency_penalty: Fraction     # kappa
    t_device_sync: int

    def __post_init__(self):
        if self.cu_count < 1:
            raise ValidationError(f"cu_count must be >= 1, got {self.cu_count}")
        if self.resident_blocks_per_cu < 1:
            raise ValidationError("resident_blocks_per_cu must be >= 1")
        for name in ("t_block", "t_launch", "t_copy_base", "t_device_sync"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.max_concurrent_kernels < 1:
            raise ValidationError("max_concurrent_kernels must be >= 1")
        if self.t_copy_per_byte < 0 or self.concurrency_penalty < 0:
            raise ValidationError("rates must be >= 0")

    @property
    def block_capacity(self) -> int:
        return self.cu_count * self.resident_blocks_per_cu


@dataclass(frozen=True)
class KernelSpec:
    kernel_id: str
    blocks: int
    work_factor: Fraction
    threads_per_block: int = THREADS_PER_BLOCK
    slice_count: int = 1

    def __post_init__(self):
        if self.blocks < 1:
            raise ValidationError(f"blocks must be >= 1, got {self.blocks}")
        if self.threads_per_block != THREADS_PER_BLOCK:
            raise ValidationError(
                f"threads_per_block is fixed at {THREADS_PER_BLOCK}")
        if self.slice_count < 1:
            raise ValidationError("slice_count must be >= 1")
        if self.work_factor <= 0:
            raise ValidationError("work_factor must be > 0")


class _Stream:
    __slots__ = ("index", "queue", "idle_callbacks")

    def __init__(self, index: int):
        self.index = index
        self.queue: deque = deque()
        self.idle_callbacks: list[Callable[[VirtualTime], None]] = []


class _Op:
    __slots__ = ("seq", "stream", "gate", "token", "end_time", "parked")


class _KernelOp(_Op):
    __slots__ = ("spec", "dispatched", "retired", "block_ticks", "start_time")

    kind = "kernel"


class _CopyOp(_Op):
    __slots__ = ("duration", "nbytes", "direction")

    kind = "copy"


class _Barrier:
    __slots__ = ("threshold_seq", "remaining", "requested_at", "scheduled")

    def __init__(self, threshold_seq: int, remaining: int, requested_at: int):
        self.threshold_seq = threshold_seq
        self.remaining = remaining
        self.requested_at = requested_at
        self.scheduled = False


class VirtualDevice:
    """One accelerator co-simulated on a scheduler's clock."""

    def __init__(self, sched: Scheduler, profile: DeviceProfile,
                 record_events: bool = False, alloc_cap_bytes: int | None = None):
        self.sched = sched
        self.profile = profile
        self.record_events = record_events
        self.alloc_cap_bytes = alloc_cap_bytes
        self.events: list[tuple] = []

        self._streams: list[_Stream] = []
        self._op_seq = 0
        self._total_unfinished = 0
        self._busy_streams = 0
        self._free_slots = profile.block_capacity
        self._running = 0
        self._lane_free = True
        self._launch_queue: deque[_KernelOp] = deque()
        self._dispatch_queue: deque[_KernelOp] = deque()
        self._barriers: deque[_Barrier] = deque()
        self._barriers_requested = 0
        self._barriers_done = 0
        self._last_sync_end: VirtualTime = 0
        self._alloc_seq = 0
        self._allocated_bytes = 0

        # counters exposed to stats/reports
        self.kernels_enqueued = 0
        self.copies_enqueued = 0
        self.bytes_copied = 0
        self.raw_allocations: dict[str, int] = {"device": 0, "pinned_host": 0}
        self.sync_count = 0

    # -- streams ---------------------------------------------------------

    def create_stream(self) -> StreamId:
        """New in-order stream. Costs a device-wide sync before it is usable."""
        if len(self._streams) >= MAX_STREAMS:
            raise CapacityError(
                f"device supports at most {MAX_STREAMS} concurrent streams")
        stream = _Stream(len(self._streams))
        self._streams.append(stream)
        self._request_barrier()
        return stream.index

    def stream_busy(self, stream_id: StreamId, at: VirtualTime | None = None) -> bool:
        """True iff the stream has enqueued-but-unfinished work (end-exclusive)."""
        stream = self._stream(stream_id)
        t = self.sched.now if at is None else at
        for op in stream.queue:
            if op.end_time is None or op.end_time > t:
                return True
        return False

    def watch_stream_idle(self, stream_id: StreamId,
                          fn: Callable[[VirtualTime], None]) -> Callable[[], None]:
        """Call fn(t) when the stream next drains; returns a cancel handle."""
        stream = self._stream(stream_id)
        stream.idle_callbacks.append(fn)

        def cancel():
            if fn in stream.idle_callbacks:
                stream.idle_callbacks.remove(fn)
        return cancel

    def outstanding(self, stream_id: StreamId) -> int:
        return len(self._stream(stream_id).queue)

    def _stream(self, stream_id: StreamId) -> _Stream:
        try:
            return self._streams[stream_id]
        except IndexError:
            raise UsageError(f"unknown stream {stream_id}") from None

    # -- work submission ---------------------------------------------------

    def enqueue_kernel(self, stream_id: StreamId, spec: KernelSpec,
                       body: Callable[[], None] | None = None) -> CompletionToken:
        """Submit a kernel; returns its completion token immediately.

        The body (functional payload) runs now; event timing follows the model.
        """
        stream = self._stream(stream_id)
        if body is not None:
            body()
        op = _KernelOp()
        op.spec = spec
        op.block_ticks = int(self.profile.t_block * spec.work_factor)
        op.dispatched = 0
        op.retired = 0
        op.start_time = None
        self.kernels_enqueued += 1
        self._submit(stream, op, f"kernel:{spec.kernel_id}")
        return op.token

    def enqueue_copy(self, stream_id: StreamId, direction: str,
                     nbytes: int) -> CompletionToken:
        if direction not in ("h2d", "d2h"):
            raise UsageError(f"copy direction must be h2d or d2h, got {direction!r}")
        if nbytes < 0:
            raise UsageError("copy size must be >= 0")
        stream = self._stream(stream_id)
        op = _CopyOp()
        op.duration = self.profile.t_copy_base + int(
            nbytes * self.profile.t_copy_per_byte)
        op.nbytes = nbytes
        op.direction = direction
        self.copies_enqueued += 1
        self.bytes_copied += nbytes
        self._submit(stream, op, f"copy:{direction}")
        return op.token

    def raw_alloc(self, kind: str, nbytes: int) -> BufferId:
        """Raw allocation. Device-kind allocations drain and sync the device."""
        if kind not in ("device", "pinned_host"):
            raise UsageError(f"unknown allocation kind {kind!r}")
        if nbytes < 0:
            raise UsageError("allocation size must be >= 0")
        if self.alloc_cap_bytes is not None and \
                self._allocated_bytes + nbytes > self.alloc_cap_bytes:
            raise CapacityError(
                f"allocation of {nbytes} bytes exceeds cap {self.alloc_cap_bytes}")
        self._allocated_bytes += nbytes
        self.raw_allocations[kind] += 1
        self._alloc_seq += 1
        if kind == "device":
            self._request_barrier()
        return self._alloc_seq

    # -- event machinery ---------------------------------------------------

    def _submit(self, stream: _Stream, op: _Op, label: str) -> None:
        self._op_seq += 1
        op.seq = self._op_seq
        op.stream = stream
        op.gate = self._barriers_requested
        op.token = self.sched.new_token(f"{label}@s{stream.index}#{op.seq}")
        op.end_time = None
        op.parked = False
        if not stream.queue:
            self._busy_streams += 1
        stream.queue.append(op)
        self._total_unfinished += 1
        if stream.queue[0] is op:
            self._op_at_head(op)

    def _op_at_head(self, op: _Op) -> None:
        if op.gate > self._barriers_done:
            op.parked = True
            return
        op.parked = False
        if op.kind == "kernel":
            self._launch_queue.append(op)
            self._try_launch()
        else:
            now = self.sched.now
            op.end_time = now + op.duration
            self.sched.post(op.end_time, self._copy_end, op)

    def _try_launch(self) -> None:
        while (self._lane_free and self._launch_queue
               and self._running < self.profile.max_concurrent_kernels
               and self._free_slots >= 1):
            op = self._launch_queue.popleft()
            self._lane_free = False
            self._running += 1
            now = self.sched.now
            op.start_time = now
            # Streams other than the launching one with work in flight.
            others = self._busy_streams - 1
            penalty = self.profile.concurrency_penalty
            overhead = self.profile.t_launch + int(
                self.profile.t_launch * penalty * others)
            self._log(now, "kernel_start", op.stream.index, op.spec)
            self.sched.post(now + overhead, self._launch_done, op)

    def _launch_done(self, op: _KernelOp) -> None:
        self._lane_free = True
        self._dispatch_queue.append(op)
        self._dispatch_blocks()
        self._try_launch()

    def _dispatch_blocks(self) -> None:
        now = self.sched.now
        while self._free_slots > 0 and self._dispatch_queue:
            op = self._dispatch_queue[0]
            group = min(self._free_slots, op.spec.blocks - op.dispatched)
            op.dispatched += group
            self._free_slots -= group
            if op.dispatched == op.spec.blocks:
                op.end_time = now + op.block_ticks
                self._dispatch_queue.popleft()
            self.sched.post(now + op.block_ticks, self._retire, (op, group))

    def _retire(self, arg: tuple[_KernelOp, int]) -> None:
        op, group = arg
        now = self.sched.now
        self._free_slots += group
        op.retired += group
        self._log(now, "block_retire", op.stream.index, op.spec, blocks=group)
        if op.retired == op.spec.blocks:
            self._running -= 1
            self._log(now, "kernel_end", op.stream.index, op.spec)
            op.token.fire(now)
            self._op_finished(op)
        self._dispatch_blocks()
        self._try_launch()

    def _copy_end(self, op: _CopyOp) -> None:
        now = self.sched.now
        self._log(now, "copy_end", op.stream.index, None)
        op.token.fire(now)
        self._op_finished(op)

    def _op_finished(self, op: _Op) -> None:
        stream = op.stream
        head = stream.queue.popleft()
        assert head is op, "stream finished an op out of order"
        self._total_unfinished -= 1
        for b in self._barriers:
            if op.seq <= b.threshold_seq:
                b.remaining -= 1
        if not stream.queue:
            self._busy_streams -= 1
            if stream.idle_callbacks:
                callbacks, stream.idle_callbacks = stream.idle_callbacks, []
                now = self.sched.now
                for fn in callbacks:
                    fn(now)
        else:
            self._op_at_head(stream.queue[0])
        self._maybe_begin_barrier()

    # -- device-wide syncs -------------------------------------------------

    def _request_barrier(self) -> None:
        self._barriers_requested += 1
        b = _Barrier(self._op_seq, self._total_unfinished, self.sched.now)
        self._barriers.append(b)
        self._maybe_begin_barrier()

    def _maybe_begin_barrier(self) -> None:
        if not self._barriers:
            return
        b = self._barriers[0]
        if b.scheduled or b.remaining > 0:
            return
        b.scheduled = True
        begin = max(self.sched.now, self._last_sync_end, b.requested_at)
        end = begin + self.profile.t_device_sync
        self._last_sync_end = end
        self.sched.post(begin, self._sync_begin, None)
        self.sched.post(end, self._sync_end, None)

    def _sync_begin(self, _arg) -> None:
        self._log(self.sched.now, "sync_begin", None, None)

    def _sync_end(self, _arg) -> None:
        self._log(self.sched.now, "sync_end", None, None)
        self._barriers.popleft()
        self._barriers_done += 1
        self.sync_count += 1
        for stream in self._streams:
            if stream.queue and stream.queue[0].parked:
                self._op_at_head(stream.queue[0])
        self._maybe_begin_barrier()

    # -- event log ---------------------------------------------------------

    def _log(self, t: VirtualTime, kind: str, stream_index: int | None,
             spec: KernelSpec | None, blocks: int | None = None) -> None:
        if not self.record_events:
            return
        self.events.append((
            t, kind,
            "" if stream_index is None else stream_index,
            spec.kernel_id if spec is not None else "",
            (spec.blocks if blocks is None else blocks) if spec is not None else "",
            spec.slice_count if spec is not None else "",
        ))

    def events_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["time", "kind", "stream", "kernel_id", "blocks",
                         "slice_count"])
        writer.writerows(self.events)
        return out.getvalue()

    def dump_events(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.events_csv())


def create_device(sched: Scheduler, profile: DeviceProfile,
                  **kwargs) -> VirtualDevice:
    return VirtualDevice(sched, profile, **kwargs)


# -- profile files ----------------------------------------------------------

_PROFILE_FIELDS = {
    "cu_count": int,
    "resident_blocks_per_cu": int,
    "t_block": int,
    "t_launch": int,
    "t_copy_base": int,
    "t_copy_per_byte": Fraction,
    "max_concurrent_kernels": int,
    "concurrency_penalty": Fraction,
    "t_device_sync": int,
}


def parse_profile_text(text: str, origin: str = "<string>") -> DeviceProfile:
    """Parse a key=value profile file; errors carry the offending line number."""
    values: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(origin, line_no, f"expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _PROFILE_FIELDS:
            raise ParseError(origin, line_no, f"unknown profile key {key!r}")
        if key in values:
            raise ParseError(origin, line_no, f"duplicate key {key!r}")
        conv = _PROFILE_FIELDS[key]
        try:
            if conv is int:
                # accept "108" but reject non-integral values for tick fields
                frac = Fraction(value)
                if frac.denominator != 1:
                    raise ValueError
                values[key] = int(frac)
            else:
                values[key] = Fraction(value)
        except (ValueError, ZeroDivisionError):
            raise ParseError(origin, line_no,
                             f"invalid value {value!r} for {key!r}") from None
    missing = sorted(set(_PROFILE_FIELDS) - set(values))
    if missing:
        raise ParseError(origin, 0, f"missing keys: {', '.join(missing)}")
    return DeviceProfile(**values)


def load_profile(name_or_path: str) -> DeviceProfile:
    """Load a built-in profile by name (a100like, mi100like) or from a path."""
    from importlib import resources

    if "/" not in name_or_path and "." not in name_or_path:
        builtin = resources.files("taskfuse") / "profiles" / f"{name_or_path}.profile"
        if builtin.is_file():
            return parse_profile_text(builtin.read_text(),
                                      f"{name_or_path}.profile")
    try:
        with open(name_or_path) as fh:
            text = fh.read()
    except OSError as err:
        raise UsageError(
            f"no built-in profile or readable file named {name_or_path!r}: {err}"
        ) from None
    return parse_profile_text(text, name_or_path)
