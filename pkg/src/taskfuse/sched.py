"""Cooperative task scheduler over a virtual clock.

Tasks are plain generator functions. A task suspends by yielding a command
object and is resumed by the scheduler with the command's result:

    def body():
        yield charge(1_000)              # occupy the worker for 1000 ticks
        tok = device.enqueue_kernel(...) # non-suspending calls are direct
        yield await_all(tok)             # give up the worker until ready

Time is an integer tick count (nanoseconds). The whole co-simulation is
single-threaded: one event heap totally orders every state change by
(timestamp, creation sequence), so identical inputs replay identically.

A suspended task holds no worker. Runnable tasks wait in a queue ordered by
(readiness time, spawn sequence) and are dispatched to the lowest-numbered
free worker. Only charge() consumes worker time; Python execution between
yields happens at a single virtual instant.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable

from .errors import DeadlockError, UsageError

VirtualTime = int

_PENDING = object()


class CompletionToken:
    """One-shot completion signal; transitions pending -> ready exactly once."""

    __slots__ = ("sched", "uid", "label", "ready_at", "_waiters")

    def __init__(self, sched: "Scheduler", uid: int, label: str):
        self.sched = sched
        self.uid = uid
        self.label = label
        self.ready_at: VirtualTime | None = None
        self._waiters: list[Callable[[VirtualTime], None]] = []

    @property
    def is_ready(self) -> bool:
        return self.ready_at is not None

    def on_ready(self, fn: Callable[[VirtualTime], None]) -> None:
        """Attach a continuation; fires immediately if already ready."""
        if self.ready_at is not None:
            fn(self.ready_at)
        else:
            self._waiters.append(fn)

    def fire(self, t: VirtualTime) -> None:
        if self.ready_at is not None:
            raise UsageError(f"token {self.label!r} fired twice")
        if t < self.sched.now:
            raise UsageError(f"token {self.label!r} fired in the past")
        self.ready_at = t
        waiters, self._waiters = self._waiters, []
        for fn in waiters:
            fn(t)

    def __repr__(self) -> str:
        state = f"ready@{self.ready_at}" if self.is_ready else "pending"
        return f"<token {self.label} {state}>"


class Charge:
    __slots__ = ("ticks",)

    def __init__(self, ticks: int):
        self.ticks = ticks


class AwaitAll:
    __slots__ = ("tokens",)

    def __init__(self, tokens: tuple[CompletionToken, ...]):
        self.tokens = tokens


class Park:
    """Suspend on a single token and resume with result(); used by higher
    layers (aggregation) to deliver a value at wake-up time."""

    __slots__ = ("token", "result")

    def __init__(self, token: CompletionToken, result: Callable[[], Any]):
        self.token = token
        self.result = result


def charge(ticks: int) -> Charge:
    """Command: occupy the calling task's worker for `ticks`."""
    if ticks < 0:
        raise UsageError(f"charge duration must be >= 0, got {ticks}")
    return Charge(int(ticks))


def await_all(*tokens) -> AwaitAll:
    """Command: suspend until every token is ready.

    Accepts tokens as varargs or a single iterable.
    """
    if len(tokens) == 1 and not isinstance(tokens[0], CompletionToken):
        tokens = tuple(tokens[0])
    return AwaitAll(tokens)


TaskBody = Callable[[], Generator]


class _Task:
    __slots__ = (
        "seq", "label", "gen", "state", "worker", "token",
        "send_value", "pending_count", "awaited", "active_slice",
    )

    def __init__(self, seq: int, label: str, gen: Generator,
                 token: CompletionToken):
        self.seq = seq
        self.label = label
        self.gen = gen
        self.state = "runnable"          # runnable | running | suspended | finished
        self.worker: int | None = None
        self.token = token
        self.send_value: Any = None
        self.pending_count = 0
        self.awaited: tuple[CompletionToken, ...] = ()
        self.active_slice: Any = None    # set by aggregation regions


class TaskHandle:
    __slots__ = ("_task",)

    def __init__(self, task: _Task):
        self._task = task

    @property
    def uid(self) -> int:
        return self._task.seq

    @property
    def label(self) -> str:
        return self._task.label

    @property
    def state(self) -> str:
        return self._task.state

    @property
    def token(self) -> CompletionToken:
        return self._task.token

    def __repr__(self) -> str:
        return f"<task {self._task.label} {self._task.state}>"


@dataclass
class SchedulerConfig:
    worker_count: int = 32
    host_op_costs: dict[str, int] = field(default_factory=dict)
    trace_occupancy: bool = False

    def __post_init__(self):
        if self.worker_count < 1:
            raise UsageError("worker_count must be >= 1")
        for name, ticks in self.host_op_costs.items():
            if ticks < 0:
                raise UsageError(f"host op cost {name!r} must be >= 0")


@dataclass(frozen=True)
class RunStats:
    final_time: VirtualTime
    worker_busy: tuple[VirtualTime, ...]
    events: int
    tasks_finished: int


class Scheduler:
    """Drives tasks and co-simulated devices over one shared event heap."""

    def __init__(self, config: SchedulerConfig | None = None):
        self.config = config or SchedulerConfig()
        self.now: VirtualTime = 0
        self._heap: list = []            # (time, seq, fn, arg)
        self._event_seq = 0
        self._runnable: list = []        # (ready_time, task.seq, task)
        self._free_workers = list(range(self.config.worker_count))
        heapq.heapify(self._free_workers)
        self._busy = [0] * self.config.worker_count
        self._total_charged = 0
        self._tasks: list[_Task] = []
        self._unfinished = 0
        self._finished = 0
        self._events_processed = 0
        self._token_seq = 0
        self._current: _Task | None = None
        self._closed = False
        self.occupancy_log: list[tuple] = []   # (time, worker, event, label)

    # -- public API ----------------------------------------------------

    def cost(self, name: str, default: int = 0) -> int:
        return self.config.host_op_costs.get(name, default)

    def new_token(self, label: str = "") -> CompletionToken:
        self._token_seq += 1
        return CompletionToken(self, self._token_seq, label or f"token:{self._token_seq}")

    def post(self, t: VirtualTime, fn: Callable, arg: Any = None) -> None:
        """Schedule fn(arg) at virtual time t (>= now)."""
        if t < self.now:
            raise UsageError(f"cannot post event in the past ({t} < {self.now})")
        self._event_seq += 1
        heapq.heappush(self._heap, (t, self._event_seq, fn, arg))

    def spawn(self, body: TaskBody, label: str = "") -> tuple[TaskHandle, CompletionToken]:
        """Create a task; it becomes runnable at the current virtual time."""
        if self._closed:
            raise UsageError("scheduler already ran to completion; spawn rejected")
        seq = len(self._tasks)
        label = label or f"task:{seq}"
        token = self.new_token(f"done:{label}")
        gen = body()
        if not hasattr(gen, "send"):
            raise UsageError(f"task body {label!r} is not a generator function")
        task = _Task(seq, label, gen, token)
        self._tasks.append(task)
        self._unfinished += 1
        heapq.heappush(self._runnable, (self.now, seq, task))
        return TaskHandle(task), token

    @property
    def current_task(self) -> TaskHandle | None:
        return TaskHandle(self._current) if self._current is not None else None

    def run(self) -> RunStats:
        if self._closed:
            raise UsageError("scheduler instance can only run once")
        heap, runnable = self._heap, self._runnable
        while True:
            if runnable and self._free_workers:
                _, _, task = heapq.heappop(runnable)
                worker = heapq.heappop(self._free_workers)
                task.worker = worker
                if self.config.trace_occupancy:
                    self.occupancy_log.append((self.now, worker, "acquire", task.label))
                self._step(task)
                continue
            if heap:
                t, _, fn, arg = heapq.heappop(heap)
                self.now = t
                self._events_processed += 1
                fn(arg)
                continue
            break
        self._closed = True
        if self._unfinished:
            raise DeadlockError(self._deadlock_report())
        return RunStats(
            final_time=self.now,
            worker_busy=tuple(self._busy),
            events=self._events_processed,
            tasks_finished=self._finished,
        )

    # -- internals -----------------------------------------------------

    def _deadlock_report(self) -> str:
        lines = [f"deadlock: {self._unfinished} task(s) never completed"]
        for task in self._tasks:
            if task.state == "suspended":
                toks = ", ".join(t.label for t in task.awaited if not t.is_ready)
                lines.append(f"  {task.label} suspended on [{toks}]")
            elif task.state not in ("finished",):
                lines.append(f"  {task.label} in state {task.state}")
        return "\n".join(lines)

    def _release_worker(self, task: _Task, why: str) -> None:
        heapq.heappush(self._free_workers, task.worker)
        if self.config.trace_occupancy:
            self.occupancy_log.append((self.now, task.worker, why, task.label))
        task.worker = None

    def _make_runnable(self, task: _Task) -> None:
        task.state = "runnable"
        task.awaited = ()
        heapq.heappush(self._runnable, (self.now, task.seq, task))

    def _step(self, task: _Task) -> None:
        """Advance the task's generator until it suspends, charges or ends."""
        gen = task.gen
        task.state = "running"
        while True:
            self._current = task
            try:
                cmd = gen.send(task.send_value)
            except StopIteration:
                self._current = None
                task.state = "finished"
                self._unfinished -= 1
                self._finished += 1
                self._release_worker(task, "finish")
                task.token.fire(self.now)
                return
            finally:
                self._current = None
            task.send_value = None

            if type(cmd) is Charge:
                d = cmd.ticks
                if d == 0:
                    continue
                self._busy[task.worker] += d
                self._total_charged += d
                # Task keeps its worker; resume stepping when the charge ends.
                self.post(self.now + d, self._resume_charged, task)
                return
            if type(cmd) is AwaitAll:
                pending = [t for t in cmd.tokens if not t.is_ready]
                for tok in cmd.tokens:
                    if tok.sched is not self:
                        raise UsageError(
                            f"{task.label} awaits token {tok.label!r} from a "
                            "different scheduler instance")
                if not pending:
                    continue
                self._suspend(task, pending)
                return
            if type(cmd) is Park:
                tok = cmd.token
                if tok.sched is not self:
                    raise UsageError(
                        f"{task.label} parks on a foreign token {tok.label!r}")
                if tok.is_ready:
                    task.send_value = cmd.result()
                    continue
                self._suspend(task, [tok], result=cmd.result)
                return
            raise UsageError(f"{task.label} yielded unsupported value {cmd!r}")

    def _resume_charged(self, task: _Task) -> None:
        self._step(task)

    def _suspend(self, task: _Task, pending: list[CompletionToken],
                 result: Callable[[], Any] | None = None) -> None:
        task.state = "suspended"
        task.pending_count = len(pending)
        task.awaited = tuple(pending)
        self._release_worker(task, "suspend")

        def on_token(_t, task=task, result=result):
            task.pending_count -= 1
            if task.pending_count == 0:
                if result is not None:
                    task.send_value = result()
                self._make_runnable(task)

        for tok in pending:
            tok.on_ready(on_token)


def run(roots: Iterable[TaskBody], config: SchedulerConfig | None = None) -> RunStats:
    """Spawn the given task bodies on a fresh scheduler and run to completion."""
    sched = Scheduler(config)
    for body in roots:
        sched.spawn(body)
    return sched.run()
