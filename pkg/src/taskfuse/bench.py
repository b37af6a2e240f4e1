"""Benchmark harness: sweep executor/team configurations, tabulate results.

Every cell is one fully deterministic simulation of the 64^3 advection
scenario: same config in, byte-identical table out. Times are virtual
milliseconds per time-step, averaged over the measured steps; a warm-up
step (excluded from the average) absorbs stream creation and pool growth,
so the measured steps run with zero raw device allocations and zero
device-wide syncs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

from .bufferpool import BufferPool
from .device import DeviceProfile, VirtualDevice, load_profile
from .errors import CalibrationError, ParseError, ValidationError
from .executorpool import ExecutorPool
from .hydro.scenario import GRID_N, make_state
from .hydro.step import HydroSim, driver
from .sched import Scheduler, SchedulerConfig

# solo-kernel duration targets, in ticks, for sub-grid 8: the two large
# kernels are measured hardware figures, the cheap ones are chosen targets
ANCHOR_TICKS = {
    "prep": 50_000,
    "reconstruct": 300_000,
    "flux": 150_000,
    "reduce": 20_000,
    "update": 30_000,
}

COST_KEYS = ("ghost_per_cell", "api_per_visit", "stage_per_cell",
             "readback_per_cell", "cpu_kernel_per_cell")

DEFAULT_WORKERS = 32


@dataclass(frozen=True)
class Calibration:
    """A device profile plus the per-kernel work factors that hit the anchors."""
    profile: DeviceProfile
    work_factors: dict


def calibrate(profile: DeviceProfile, anchors=None) -> Calibration:
    """Solve work factors so each solo kernel lasts exactly its anchor."""
    anchors = dict(ANCHOR_TICKS if anchors is None else anchors)
    factors = {}
    for kernel, total in anchors.items():
        ticks = total - profile.t_launch
        if ticks <= 0:
            raise CalibrationError(
                f"anchor for {kernel!r} ({total} ticks) does not exceed the "
                f"launch overhead ({profile.t_launch} ticks)")
        factors[kernel] = Fraction(ticks, profile.t_block)
    return Calibration(profile, factors)


def parse_costs_text(text: str, origin: str = "<string>") -> dict:
    """Parse a key=value cost file; keys may be a subset of COST_KEYS."""
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
        if key not in COST_KEYS:
            raise ParseError(origin, line_no, f"unknown cost key {key!r}")
        if key in values:
            raise ParseError(origin, line_no, f"duplicate key {key!r}")
        try:
            ticks = int(value)
        except ValueError:
            raise ParseError(origin, line_no,
                             f"invalid value {value!r} for {key!r}") from None
        if ticks < 0:
            raise ParseError(origin, line_no, f"negative cost for {key!r}")
        values[key] = ticks
    return values


def load_costs(path: str | None = None) -> dict:
    """Host op costs from a file, or the packaged defaults."""
    if path is None:
        ref = resources.files("taskfuse") / "profiles" / "default.costs"
        return parse_costs_text(ref.read_text(), "default.costs")
    with open(path) as fh:
        return parse_costs_text(fh.read(), path)


@dataclass(frozen=True)
class Row:
    """One benchmark cell. The nine compared fields are the table columns;
    the rest is bookkeeping that rides along without affecting equality."""
    cores: int
    subgrid: int
    executors: int
    max_team: int
    ms_per_step: float
    kernels: int
    transfers: int
    raw_allocs: int
    syncs: int
    team_sizes: dict = field(default_factory=dict, compare=False)
    measured_raw_allocs: int = field(default=0, compare=False)
    measured_syncs: int = field(default=0, compare=False)


@dataclass(frozen=True)
class BenchConfig:
    subgrid_n: int = 8
    executors: tuple = (1,)
    max_team: tuple = (1,)
    profile: str = "a100like"
    steps: int = 15
    fmt: str = "csv"

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.fmt not in ("csv", "markdown"):
            raise ValidationError(f"unknown format {self.fmt!r}")


@dataclass(frozen=True)
class Report:
    rows: tuple
    profile: str = ""
    steps: int = 0


def _presize_pools(buffers: BufferPool, subgrid_n: int, grid_n: int,
                   max_team: int) -> None:
    # every (shape, team size) bucket the run can touch, so steady state
    # never raw-allocates
    tasks = (grid_n // subgrid_n) ** 3
    ext3 = (subgrid_n + 6) ** 3
    n3 = subgrid_n ** 3
    for size in range(1, min(max_team, tasks) + 1):
        count = math.ceil(tasks / size)
        for kind in ("device", "pinned_host"):
            for length in (ext3, n3):
                buffers.ensure(kind, "f8", length * size, count)


def run_cell(profile: DeviceProfile, work_factors: dict, subgrid_n: int,
             executors: int, max_team: int, steps: int,
             policy: str = "round_robin", grid_n: int = GRID_N,
             workers: int = DEFAULT_WORKERS, costs: dict | None = None,
             record_events: bool = False):
    """One deterministic run of warm-up + `steps` steps; returns (Row, sim,
    device). The row's per-step columns cover only the measured steps."""
    sched = Scheduler(SchedulerConfig(worker_count=workers,
                                      host_op_costs=dict(costs or {})))
    state = make_state(subgrid_n, grid_n)
    if executors == 0:
        device = None
        pool = ExecutorPool(sched, None, 0)
        sim = HydroSim(sched, state, pool)
    else:
        device = VirtualDevice(sched, profile, record_events=record_events)
        pool = ExecutorPool(sched, device, executors, policy)
        buffers = BufferPool(device)
        _presize_pools(buffers, subgrid_n, grid_n, max_team)
        sim = HydroSim(sched, state, pool, buffers,
                       work_factors=work_factors, max_team=max_team)

    marks = []

    def on_step(_index):
        if device is None:
            marks.append((sched.now, 0, 0, 0, 0))
        else:
            marks.append((sched.now, device.kernels_enqueued,
                          device.copies_enqueued,
                          device.raw_allocations["device"],
                          device.sync_count))

    sched.spawn(lambda: driver(sim, steps + 1, on_step), label="bench")
    sched.run()

    warm, last = marks[0], marks[-1]
    span = last[0] - warm[0]
    ms = span / steps / 1e6

    def per_step(end, start):
        delta = end - start
        return delta // steps if delta % steps == 0 else delta / steps

    sizes: dict[int, int] = {}
    for region in sim.regions.values():
        for size, count in region.stats().size_histogram.items():
            sizes[size] = sizes.get(size, 0) + count
    return Row(
        cores=workers,
        subgrid=subgrid_n,
        executors=executors,
        max_team=1 if executors == 0 else max_team,
        ms_per_step=ms,
        kernels=per_step(last[1], warm[1]),
        transfers=per_step(last[2], warm[2]),
        raw_allocs=0 if device is None else device.raw_allocations["device"],
        syncs=0 if device is None else device.sync_count,
        team_sizes=dict(sorted(sizes.items())),
        measured_raw_allocs=last[3] - warm[3],
        measured_syncs=last[4] - warm[4],
    ), sim, device


def run_matrix(cfg: BenchConfig, costs: dict | None = None,
               grid_n: int = GRID_N, dump_events: str | None = None) -> Report:
    """Sweep the (executors, max_team) grid plus a host-only baseline.

    With `dump_events`, the device event log of the last cell is written
    to that path as CSV.
    """
    profile = load_profile(cfg.profile)
    factors = calibrate(profile).work_factors
    if costs is None:
        costs = load_costs()
    cells = [(0, 1)]
    for n_exec in sorted(set(cfg.executors)):
        for cap in sorted(set(cfg.max_team)):
            if n_exec != 0:
                cells.append((n_exec, cap))
    rows = []
    for i, (n_exec, cap) in enumerate(cells):
        record = dump_events is not None and i == len(cells) - 1
        row, _, device = run_cell(profile, factors, cfg.subgrid_n, n_exec,
                                  cap, cfg.steps, grid_n=grid_n, costs=costs,
                                  record_events=record)
        if record:
            device.dump_events(dump_events)
        rows.append(row)
    return Report(rows=tuple(rows), profile=cfg.profile, steps=cfg.steps)


COLUMNS = ("cores", "subgrid", "executors", "max_team", "ms_per_step",
           "kernels", "transfers", "raw_allocs", "syncs")

_SECTIONS = (
    ("Host only", lambda r: r.executors == 0),
    ("Strategy 1: larger sub-grids",
     lambda r: r.executors == 1 and r.max_team == 1),
    ("Strategy 2: more executors",
     lambda r: r.executors >= 1 and r.max_team == 1),
    ("Strategy 3: on-the-fly aggregation", lambda r: r.executors == 1),
    ("Combined strategies", lambda r: r.executors > 1 and r.max_team > 1),
)


def _cells(row: Row) -> list[str]:
    return [str(getattr(row, col)) for col in COLUMNS]


def emit(report: Report, fmt: str = "csv") -> str:
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in report.rows:
            writer.writerow(_cells(row))
        return out.getvalue()
    if fmt != "markdown":
        raise ValidationError(f"unknown format {fmt!r}")
    lines = [f"# Work aggregation benchmark: profile {report.profile}, "
             f"{report.steps} measured steps", ""]
    header = "| " + " | ".join(COLUMNS) + " |"
    rule = "|" + "|".join(" --- " for _ in COLUMNS) + "|"
    for title, belongs in _SECTIONS:
        rows = [r for r in report.rows if belongs(r)]
        if not rows:
            continue
        lines.append(f"## {title}")
        lines.append("")
        lines.append(header)
        lines.append(rule)
        for row in rows:
            lines.append("| " + " | ".join(_cells(row)) + " |")
        lines.append("")
    return "\n".join(lines)


def parse_report(text: str) -> Report:
    """Read back a CSV report produced by emit()."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError("empty report text") from None
    if tuple(header) != COLUMNS:
        raise ValidationError(f"unexpected report header {header!r}")
    rows = []
    for cells in reader:
        if not cells:
            continue
        values = dict(zip(COLUMNS, cells))
        rows.append(Row(
            cores=int(values["cores"]),
            subgrid=int(values["subgrid"]),
            executors=int(values["executors"]),
            max_team=int(values["max_team"]),
            ms_per_step=float(values["ms_per_step"]),
            kernels=_count(values["kernels"]),
            transfers=_count(values["transfers"]),
            raw_allocs=int(values["raw_allocs"]),
            syncs=int(values["syncs"]),
        ))
    return Report(rows=tuple(rows))


def _count(text: str):
    # per-step averages are integers in steady state, but stay honest if not
    return int(text) if text.isdigit() else float(text)
