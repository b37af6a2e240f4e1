"""Whole-grid reference integrator.

Solves the same advection problem as the staged kernels, but on the global
periodic field in one shot per iteration, using wrap-around indexing instead
of ghost exchange. Kept deliberately separate from the kernel code paths; the
elementwise arithmetic matches operation for operation, so a correct staged
run reproduces this bit for bit.
"""

from __future__ import annotations

import numpy as np

from .scenario import CFL, ITERATIONS_PER_STEP, VELOCITY, max_speed


def _limited_slope(u: np.ndarray, axis: int) -> np.ndarray:
    fwd = np.roll(u, -1, axis=axis) - u
    bwd = u - np.roll(u, 1, axis=axis)
    return np.where(fwd * bwd <= 0.0, 0.0,
                    np.where(np.abs(fwd) < np.abs(bwd), fwd, bwd))


def advect_once(u: np.ndarray, velocity=VELOCITY,
                dt_dx: float | None = None) -> np.ndarray:
    if dt_dx is None:
        dt_dx = CFL / max_speed(velocity)
    div = None
    for axis in range(3):
        sigma = _limited_slope(u, axis)
        a = velocity[axis]
        if a >= 0.0:
            face = a * (u + 0.5 * sigma)
        else:
            minus = u - 0.5 * sigma
            face = a * np.roll(minus, -1, axis=axis)
        term = face - np.roll(face, 1, axis=axis)
        div = term if div is None else div + term
    return u - dt_dx * div


def reference_step(u: np.ndarray, velocity=VELOCITY,
                   dt_dx: float | None = None,
                   iterations: int = ITERATIONS_PER_STEP) -> np.ndarray:
    out = u
    for _ in range(iterations):
        out = advect_once(out, velocity, dt_dx)
    return out
