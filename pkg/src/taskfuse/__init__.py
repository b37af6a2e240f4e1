"""taskfuse: deterministic co-simulation of task-based GPU work aggregation.

A cooperative virtual-clock scheduler drives tasks that talk to a simulated
accelerator (streams, block slots, launch lane, device-wide syncs), a
recycling buffer pool, executor pools and on-the-fly kernel aggregation
regions. A finite-volume advection mini-app exercises the three work
submission strategies; the bench harness sweeps their parameter space.
"""

from .errors import (
    CalibrationError, CapacityError, DeadlockError, OrderingViolationError,
    ParseError, SimError, UsageError, ValidationError,
)
from .sched import (
    CompletionToken, RunStats, Scheduler, SchedulerConfig, TaskHandle,
    VirtualTime, await_all, charge, run,
)

__all__ = [
    "CalibrationError", "CapacityError", "CompletionToken", "DeadlockError",
    "OrderingViolationError", "ParseError", "RunStats", "Scheduler",
    "SchedulerConfig", "SimError", "TaskHandle", "UsageError",
    "ValidationError", "VirtualTime", "await_all", "charge", "run",
]

__version__ = "0.1.0"
