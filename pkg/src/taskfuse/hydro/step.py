"""Task bodies and the driver loop for the staged advection run.

One task per sub-grid per iteration. Each task refreshes its ghost shell,
then walks the five kernel stages in order; on the accelerator path every
stage is one aggregation-region visit (allocate staging and device buffers,
upload the extended field, launch, download the owned result). The numeric
payload runs at issue time on per-sub-grid scratch, so results never depend
on how visits get fused.

Host-side work is charged through named cost knobs so a run can be retimed
without touching this module:

    ghost_per_cell      ghost exchange, per ghost cell
    api_per_visit       driver API overhead, per stage visit
    stage_per_cell      packing into pinned staging, per uploaded cell
    readback_per_cell   unpacking results, per downloaded cell
    cpu_kernel_per_cell host fallback kernels, per domain cell
"""

from __future__ import annotations

from fractions import Fraction
from functools import partial

from ..aggregator import AggregationRegion
from ..bufferpool import BufferPool
from ..executorpool import ExecutorPool
from ..sched import Scheduler, await_all, charge
from .kernels import (KERNEL_ORDER, blocks_for, domain_cells, flux_body,
                      make_scratch, prep_body, reconstruct_body, reduce_body,
                      update_body)
from .scenario import (ITERATIONS_PER_STEP, VELOCITY, HydroState, dt_over_dx,
                       exchange_ghosts, ghost_cells, max_speed)

ITEM_BYTES = 8          # every field array is float64


class HydroSim:
    """Binds one decomposed state to a scheduler and (optionally) a device."""

    def __init__(self, sched: Scheduler, state: HydroState,
                 executors: ExecutorPool, buffers: BufferPool | None = None,
                 work_factors: dict[str, Fraction] | None = None,
                 max_team: int = 1, velocity=VELOCITY):
        self.sched = sched
        self.state = state
        self.executors = executors
        self.velocity = velocity
        self.dt_dx = dt_over_dx(velocity)
        if work_factors is None:
            work_factors = {k: Fraction(1) for k in KERNEL_ORDER}
        self.work_factors = work_factors
        self.scratch = {b: make_scratch(state.n) for b in state.blocks}
        self.regions: dict[str, AggregationRegion] = {}
        self.buffers = buffers
        if not executors.cpu_only:
            if buffers is None:
                self.buffers = BufferPool(executors.device)
            # One parent per expected team: spreading arrivals over more
            # parents than concurrent teams starves every team of members.
            # Parents share streams when they outnumber executors.
            parents = max(1, len(state.blocks) // max_team)
            self.regions = {
                k: AggregationRegion(sched, executors, self.buffers,
                                     name=k, max_team=max_team,
                                     parent_count=parents)
                for k in KERNEL_ORDER
            }

    def _run_kernel(self, kernel: str, u_ext, out_ext, scratch) -> None:
        n = self.state.n
        if kernel == "prep":
            prep_body(u_ext, scratch)
        elif kernel == "reconstruct":
            reconstruct_body(scratch, n)
        elif kernel == "flux":
            flux_body(scratch, n, self.velocity)
        elif kernel == "reduce":
            reduce_body(scratch, self.velocity)
        else:
            update_body(u_ext, out_ext, scratch, n, self.dt_dx)

    def task_iteration(self, block):
        """Task body: one sub-grid through one iteration."""
        state = self.state
        sched = self.sched
        n = state.n
        yield charge(sched.cost("ghost_per_cell", 25) * ghost_cells(n))
        exchange_ghosts(state, block)
        scratch = self.scratch[block]
        u_ext = state.u[block]
        out_ext = state.u_next[block]
        if self.executors.cpu_only:
            rate = sched.cost("cpu_kernel_per_cell", 1469)
            for kernel in KERNEL_ORDER:
                yield charge(rate * domain_cells(kernel, n))
                self._run_kernel(kernel, u_ext, out_ext, scratch)
        else:
            ext3 = state.ext ** 3
            n3 = n ** 3
            api = sched.cost("api_per_visit", 2000)
            stage = sched.cost("stage_per_cell", 30)
            readback = sched.cost("readback_per_cell", 30)
            for kernel in KERNEL_ORDER:
                member = yield self.regions[kernel].enter()
                yield charge(api)
                member.slice_alloc("pinned_host", "f8", ext3)
                member.slice_alloc("device", "f8", ext3)
                member.slice_alloc("pinned_host", "f8", n3)
                member.slice_alloc("device", "f8", n3)
                yield charge(stage * ext3)
                member.slice_copy("h2d", ext3 * ITEM_BYTES)
                member.slice_launch(
                    kernel, blocks_for(kernel, n), self.work_factors[kernel],
                    body=lambda k=kernel: self._run_kernel(
                        k, u_ext, out_ext, scratch))
                landed = member.slice_copy("d2h", n3 * ITEM_BYTES)
                yield await_all(landed)
                member.leave()
                yield charge(readback * n3)
        # the reduction feeds the step-size control; pin it to the exact
        # advection speed so a wrong stage wiring fails loudly
        assert scratch["reduce_out"][0] == max_speed(self.velocity)


def driver(sim: HydroSim, steps: int, step_hook=None):
    """Root task body: run `steps` full steps under one scheduler."""
    sched = sim.sched
    state = sim.state
    dt = sim.dt_dx / state.grid_n
    for _ in range(steps):
        for _ in range(ITERATIONS_PER_STEP):
            tokens = [
                sched.spawn(partial(sim.task_iteration, b),
                            label=f"hydro{b}")[1]
                for b in state.blocks
            ]
            yield await_all(*tokens)
            state.swap()
            state.time += dt
        state.steps_taken += 1
        if step_hook is not None:
            step_hook(state.steps_taken)
