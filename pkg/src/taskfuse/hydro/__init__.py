from .kernels import KERNEL_ORDER, blocks_for, domain_cells, make_scratch
from .reference import advect_once, reference_step
from .scenario import (CFL, GHOST, GRID_N, ITERATIONS_PER_STEP, VELOCITY,
                       HydroState, assemble, dt_over_dx, dump_state,
                       exchange_ghosts, ghost_cells, initial_field,
                       load_state, make_state, max_speed)
from .step import HydroSim, driver

__all__ = [
    "KERNEL_ORDER", "blocks_for", "domain_cells", "make_scratch",
    "advect_once", "reference_step",
    "CFL", "GHOST", "GRID_N", "ITERATIONS_PER_STEP", "VELOCITY",
    "HydroState", "assemble", "dt_over_dx", "dump_state", "exchange_ghosts",
    "ghost_cells", "initial_field", "load_state", "make_state", "max_speed",
    "HydroSim", "driver",
]
