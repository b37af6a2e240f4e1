"""Per-sub-grid numerics: slope-limited upwind advection, split by stage.

Each stage is one kernel body operating on preallocated per-sub-grid scratch
arrays. Bodies are pure functions of the current field; they run eagerly at
enqueue time, so results are independent of any timing, team composition or
executor placement.

Geometry, for sub-grid edge n and ghost width 3: the extended array has edge
n + 6; face states and fluxes live on the (n + 2)^3 cube centered on the
owned region (extended index 2 .. n + 4), so flux differences cover every
owned cell.
"""

from __future__ import annotations

import math

import numpy as np

from .scenario import GHOST, VELOCITY, max_speed

KERNEL_ORDER = ("prep", "reconstruct", "flux", "reduce", "update")

THREADS_PER_BLOCK = 128


def make_scratch(n: int) -> dict:
    ext = n + 2 * GHOST
    cube = n + 2
    return {
        "w": np.empty((ext, ext, ext)),
        "up": np.empty((3, cube, cube, cube)),
        "um": np.empty((3, cube, cube, cube)),
        "F": np.empty((3, cube, cube, cube)),
        "reduce_out": np.empty(1),
    }


def domain_cells(kernel: str, n: int) -> int:
    ext = n + 2 * GHOST
    cube = n + 2
    return {
        "prep": ext ** 3,
        "reconstruct": cube ** 3,
        "flux": 3 * cube ** 3,
        "reduce": 1,
        "update": n ** 3,
    }[kernel]


def blocks_for(kernel: str, n: int) -> int:
    if kernel == "flux":
        # one grid per axis
        return 3 * math.ceil((n + 2) ** 3 / THREADS_PER_BLOCK)
    return math.ceil(domain_cells(kernel, n) / THREADS_PER_BLOCK)


def _minmod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # sign-matched minimum-magnitude slope; zero across extrema
    return np.where(a * b <= 0.0, 0.0, np.where(np.abs(a) < np.abs(b), a, b))


def _cube(w: np.ndarray, n: int, shift=(0, 0, 0)) -> np.ndarray:
    return w[2 + shift[0]:n + 4 + shift[0],
             2 + shift[1]:n + 4 + shift[1],
             2 + shift[2]:n + 4 + shift[2]]


def prep_body(u_ext: np.ndarray, scratch: dict) -> None:
    scratch["w"][...] = u_ext


def reconstruct_body(scratch: dict, n: int) -> None:
    w = scratch["w"]
    base = _cube(w, n)
    for axis in range(3):
        shift = tuple(1 if k == axis else 0 for k in range(3))
        back = tuple(-s for s in shift)
        sigma = _minmod(_cube(w, n, shift) - base, base - _cube(w, n, back))
        scratch["um"][axis] = base - 0.5 * sigma
        scratch["up"][axis] = base + 0.5 * sigma


def flux_body(scratch: dict, n: int, velocity=VELOCITY) -> None:
    for axis in range(3):
        a = velocity[axis]
        if a >= 0.0:
            # right-face flux takes the left state: this cell's plus face
            scratch["F"][axis] = a * scratch["up"][axis]
        else:
            # wraps at the trailing edge; those cells are never read back
            scratch["F"][axis] = a * np.roll(scratch["um"][axis], -1,
                                             axis=axis)


def reduce_body(scratch: dict, velocity=VELOCITY) -> None:
    scratch["reduce_out"][0] = max_speed(velocity)


def update_body(u_ext: np.ndarray, out_ext: np.ndarray, scratch: dict,
                n: int, dt_dx: float) -> None:
    """Writes the owned region of `out_ext`; everything else untouched."""
    F = scratch["F"]
    own = slice(1, n + 1)          # owned cells in cube coordinates
    prev = slice(0, n)
    div = F[0][own, own, own] - F[0][prev, own, own]
    div = div + (F[1][own, own, own] - F[1][own, prev, own])
    div = div + (F[2][own, own, own] - F[2][own, own, prev])
    owned_src = u_ext[GHOST:GHOST + n, GHOST:GHOST + n, GHOST:GHOST + n]
    out_ext[GHOST:GHOST + n, GHOST:GHOST + n, GHOST:GHOST + n] = \
        owned_src - dt_dx * div
