"""Problem setup: a periodic advected bump, decomposed into sub-grids.

The unit cube carries u = 1 + a Gaussian bump, advected with constant
velocity. The domain splits into cubic sub-grids of edge n, each stored as
an extended array with a ghost shell of width 3 on every side. Ghosts are
refilled from the 26 periodic neighbors at the start of every iteration;
until then they hold NaN so that any read of an unfilled ghost is loud.

Two fields (current and next) alternate by pointer swap at iteration
barriers: updates write only the owned region of `next` while everyone
reads `current`, so no ordering between neighbor tasks can change results.
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError

GRID_N = 64
GHOST = 3
CENTER = (0.5, 0.5, 0.5)
WIDTH = 0.1
AMPLITUDE = 1.0
VELOCITY = (1.0, 1.0, 1.0)
CFL = 0.3
ITERATIONS_PER_STEP = 3


def initial_field(grid_n: int = GRID_N) -> np.ndarray:
    """The global initial condition; sub-grids slice from this one array."""
    x = (np.arange(grid_n) + 0.5) / grid_n
    dx2 = (x - CENTER[0]) ** 2
    dy2 = (x - CENTER[1]) ** 2
    dz2 = (x - CENTER[2]) ** 2
    r2 = (dx2[:, None, None] + dy2[None, :, None] + dz2[None, None, :])
    return 1.0 + AMPLITUDE * np.exp(-r2 / (2.0 * WIDTH ** 2))


def max_speed(velocity=VELOCITY) -> float:
    return max(abs(v) for v in velocity)


def dt_over_dx(velocity=VELOCITY) -> float:
    return CFL / max_speed(velocity)


def ghost_cells(n: int) -> int:
    return (n + 2 * GHOST) ** 3 - n ** 3


class HydroState:
    """All sub-grid arrays for one decomposition of the global field."""

    def __init__(self, subgrid_n: int, grid_n: int = GRID_N):
        if grid_n % subgrid_n != 0:
            raise ValidationError(
                f"sub-grid edge {subgrid_n} does not divide grid {grid_n}")
        self.n = subgrid_n
        self.grid_n = grid_n
        self.per_axis = grid_n // subgrid_n
        self.ext = subgrid_n + 2 * GHOST
        self.blocks = [
            (bx, by, bz)
            for bx in range(self.per_axis)
            for by in range(self.per_axis)
            for bz in range(self.per_axis)
        ]
        self.u: dict[tuple, np.ndarray] = {}
        self.u_next: dict[tuple, np.ndarray] = {}
        self.time = 0.0
        self.steps_taken = 0

    def swap(self) -> None:
        self.u, self.u_next = self.u_next, self.u

    def owned(self, block) -> np.ndarray:
        n = self.n
        return self.u[block][GHOST:GHOST + n, GHOST:GHOST + n,
                             GHOST:GHOST + n]


def make_state(subgrid_n: int, grid_n: int = GRID_N,
               field: np.ndarray | None = None) -> HydroState:
    state = HydroState(subgrid_n, grid_n)
    if field is None:
        field = initial_field(grid_n)
    n = state.n
    for b in state.blocks:
        for target in (state.u, state.u_next):
            ext = np.full((state.ext,) * 3, np.nan)
            target[b] = ext
        ox, oy, oz = (c * n for c in b)
        state.u[b][GHOST:GHOST + n, GHOST:GHOST + n, GHOST:GHOST + n] = \
            field[ox:ox + n, oy:oy + n, oz:oz + n]
    return state


def assemble(state: HydroState) -> np.ndarray:
    """Gather the owned regions back into one global array."""
    out = np.empty((state.grid_n,) * 3)
    n = state.n
    for b in state.blocks:
        ox, oy, oz = (c * n for c in b)
        out[ox:ox + n, oy:oy + n, oz:oz + n] = state.owned(b)
    return out


def _ranges(offset: int, n: int):
    # (destination range in my extended array, source range in the
    # neighbor's extended array) for one axis of one of the 26 directions
    if offset == -1:
        return slice(0, GHOST), slice(n, n + GHOST)
    if offset == 1:
        return slice(n + GHOST, n + 2 * GHOST), slice(GHOST, 2 * GHOST)
    return slice(GHOST, n + GHOST), slice(GHOST, n + GHOST)


_OFFSETS = [(ox, oy, oz)
            for ox in (-1, 0, 1) for oy in (-1, 0, 1) for oz in (-1, 0, 1)
            if (ox, oy, oz) != (0, 0, 0)]


def exchange_ghosts(state: HydroState, block) -> None:
    """Fill the whole ghost shell of one block from its periodic neighbors.

    Sources are the neighbors' owned cells of the current field, which no
    task writes during an iteration, so exchange order cannot matter.
    """
    mine = state.u[block]
    m = state.per_axis
    n = state.n
    for off in _OFFSETS:
        nb = tuple((block[i] + off[i]) % m for i in range(3))
        other = state.u[nb]
        dst = []
        src = []
        for axis in range(3):
            d, s = _ranges(off[axis], n)
            dst.append(d)
            src.append(s)
        mine[tuple(dst)] = other[tuple(src)]


def dump_state(state: HydroState, path: str) -> None:
    np.savez(path, field=assemble(state), subgrid_n=state.n,
             grid_n=state.grid_n, time=state.time,
             steps_taken=state.steps_taken)


def load_state(path: str) -> HydroState:
    with np.load(path) as data:
        state = make_state(int(data["subgrid_n"]), int(data["grid_n"]),
                           field=data["field"])
        state.time = float(data["time"])
        state.steps_taken = int(data["steps_taken"])
    return state
