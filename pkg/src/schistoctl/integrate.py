"""Fixed-step RK4 time stepping with nonnegativity guards and trajectory IO.

This module is model-agnostic: it integrates any ``rhs(x, t) -> dx`` over a
uniform :class:`TimeGrid`, optionally splitting each output step into substeps
when the dynamics are fast relative to the output resolution. States that dip
microscopically below zero (round-off at an absorbing boundary) are clamped to
exactly zero; genuinely negative excursions raise :class:`IntegrationError`
because they mean the step size is too coarse for the current rates, not that
the model is wrong.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "IntegrationError",
    "TimeGrid",
    "Trajectory",
    "integrate_forward",
    "integrate_backward",
    "sample",
    "trajectory_to_csv",
    "trajectory_from_csv",
]

RHS = Callable[[np.ndarray, float], np.ndarray]
Substeps = Union[int, Callable[[float, np.ndarray], int]]


class IntegrationError(RuntimeError):
    """A trajectory left the finite (or nonnegative) regime.

    Attributes:
        step: index of the output step being computed when the failure
            happened (the state at index ``step`` was still valid).
    """

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    """Uniform output grid t_k = t0 + k dt for k = 0..n, with t_n == t_end."""

    t0: float
    t_end: float
    dt: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.dt) or self.dt <= 0.0:
            raise ValueError(f"dt must be positive and finite, got {self.dt}")
        span = self.t_end - self.t0
        n = int(round(span / self.dt))
        if n < 1:
            raise ValueError(
                f"grid needs at least one step: span {span} with dt {self.dt}")
        if abs(self.t0 + n * self.dt - self.t_end) > 1e-9 * max(abs(span), self.dt):
            raise ValueError(f"dt {self.dt} does not divide the span {span} evenly")

    @property
    def n(self) -> int:
        """Number of steps (one less than the number of grid points)."""
        return int(round((self.t_end - self.t0) / self.dt))

    def points(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n + 1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Values on a time grid: row k of ``values`` is the state at t_k."""

    grid: TimeGrid
    values: np.ndarray
    names: list[str] | None = None

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != self.grid.n + 1:
            raise ValueError(
                f"values must have shape ({self.grid.n + 1}, dim), got {v.shape}")
        if self.names is not None and len(self.names) != v.shape[1]:
            raise ValueError(
                f"{len(self.names)} names for {v.shape[1]} columns")
        object.__setattr__(self, "values", v)


def _rk4_step(rhs: RHS, x: np.ndarray, t: float, h: float) -> np.ndarray:
    k1 = np.asarray(rhs(x, t), dtype=float)
    k2 = np.asarray(rhs(x + 0.5 * h * k1, t + 0.5 * h), dtype=float)
    k3 = np.asarray(rhs(x + 0.5 * h * k2, t + 0.5 * h), dtype=float)
    k4 = np.asarray(rhs(x + h * k3, t + h), dtype=float)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _resolve_substeps(substeps: Substeps, t: float, x: np.ndarray) -> int:
    nsub = substeps(t, x) if callable(substeps) else int(substeps)
    if nsub < 1:
        raise ValueError(f"substep count must be >= 1, got {nsub}")
    return nsub


def integrate_forward(
    rhs: RHS,
    initial: Sequence[float],
    grid: TimeGrid,
    *,
    substeps: Substeps = 1,
    component_bounds: Sequence[float] | None = None,
    nonneg: bool = True,
) -> Trajectory:
    """Integrate ``x' = rhs(x, t)`` from ``grid.t0`` to ``grid.t_end``.

    Args:
        rhs: vector field, called as ``rhs(x, t)``.
        initial: state at ``grid.t0``.
        grid: output grid; one state row is stored per grid point.
        substeps: substeps per output step, either a fixed count or a callable
            ``(t, x) -> int`` evaluated once per output step.
        component_bounds: per-component scale used to size the negativity
            clamp band ``1e-12 * (1 + |bound_i|)``; defaults to scale 0.
        nonneg: when True, values inside the clamp band snap to 0 and values
            below it raise :class:`IntegrationError`.

    Returns:
        Trajectory of shape ``(grid.n + 1, dim)``.
    """
    x = np.array(initial, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"initial state must be a flat vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state contains non-finite components")

    eps = np.full(x.size, 1e-12)
    if component_bounds is not None:
        b = np.asarray(component_bounds, dtype=float)
        if b.shape != x.shape:
            raise ValueError(f"component_bounds shape {b.shape} != state shape {x.shape}")
        eps = 1e-12 * (1.0 + np.abs(b))

    out = np.empty((grid.n + 1, x.size))
    out[0] = x
    for k in range(grid.n):
        tk = grid.t0 + k * grid.dt
        nsub = _resolve_substeps(substeps, tk, x)
        h = grid.dt / nsub
        for s in range(nsub):
            x = _rk4_step(rhs, x, tk + s * h, h)
            if not np.all(np.isfinite(x)):
                raise IntegrationError(
                    f"non-finite state while computing step {k}", step=k)
            if nonneg:
                below = x < 0.0
                if below.any():
                    if np.any(x < -eps):
                        i = int(np.argmin(x + eps))
                        raise IntegrationError(
                            f"component {i} reached {x[i]:.3e} at step {k}; "
                            f"dt (or the substep count) is too coarse for the "
                            f"current rates", step=k)
                    x = np.where(below, 0.0, x)
        out[k + 1] = x
    return Trajectory(grid=grid, values=out)


def integrate_backward(
    rhs: RHS,
    terminal: Sequence[float],
    grid: TimeGrid,
    *,
    substeps: Substeps = 1,
) -> Trajectory:
    """Integrate ``x' = rhs(x, t)`` from ``grid.t_end`` down to ``grid.t0``.

    The terminal state is pinned at the last grid point and values are stored
    in forward time order, so ``values[k]`` is the solution at ``t_k``. No
    nonnegativity handling is applied: backward sweeps carry adjoint
    variables, which are signed.
    """
    lam = np.array(terminal, dtype=float)
    if lam.ndim != 1:
        raise ValueError(f"terminal state must be a flat vector, got shape {lam.shape}")
    if not np.all(np.isfinite(lam)):
        raise ValueError("terminal state contains non-finite components")

    out = np.empty((grid.n + 1, lam.size))
    out[grid.n] = lam
    for k in range(grid.n, 0, -1):
        tk = grid.t0 + k * grid.dt
        nsub = _resolve_substeps(substeps, tk, lam)
        h = -grid.dt / nsub
        for s in range(nsub):
            lam = _rk4_step(rhs, lam, tk + s * h, h)
            if not np.all(np.isfinite(lam)):
                raise IntegrationError(
                    f"non-finite state while computing step {k - 1} "
                    f"(backward)", step=k - 1)
        out[k - 1] = lam
    return Trajectory(grid=grid, values=out)


def sample(traj: Trajectory, t: float) -> np.ndarray:
    """Evaluate a trajectory at time t: exact at grid points, linear between.

    Raises ValueError when t lies outside the grid span.
    """
    g = traj.grid
    tol = 1e-9 * max(abs(g.t_end - g.t0), g.dt)
    if t < g.t0 - tol or t > g.t_end + tol:
        raise ValueError(f"t = {t} outside the grid span [{g.t0}, {g.t_end}]")

    u = (t - g.t0) / g.dt
    k_near = int(round(u))
    if 0 <= k_near <= g.n and t == g.t0 + k_near * g.dt:
        return traj.values[k_near].copy()

    k = min(max(int(np.floor(u)), 0), g.n - 1)
    f = (t - (g.t0 + k * g.dt)) / g.dt
    f = min(max(f, 0.0), 1.0)
    return (1.0 - f) * traj.values[k] + f * traj.values[k + 1]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Write ``t,<name>,...`` rows with LF line endings and %.17g values."""
    names = traj.names or [f"x{i}" for i in range(traj.values.shape[1])]
    pts = traj.grid.points()
    lines = ["t," + ",".join(names)]
    for k in range(traj.grid.n + 1):
        lines.append(",".join([_fmt(pts[k])] + [_fmt(v) for v in traj.values[k]]))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def trajectory_from_csv(path) -> Trajectory:
    """Read a trajectory written by :func:`trajectory_to_csv`."""
    lines = [ln for ln in Path(path).read_text(encoding="ascii").split("\n") if ln]
    header = lines[0].split(",")
    if not header or header[0] != "t":
        raise ValueError(f"{path}: first column must be 't', got {header[:1]}")
    rows = [[float(tok) for tok in ln.split(",")] for ln in lines[1:]]
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != len(header):
        raise ValueError(f"{path}: malformed trajectory table")
    t = arr[:, 0]
    grid = TimeGrid(float(t[0]), float(t[-1]), float((t[-1] - t[0]) / (len(t) - 1)))
    return Trajectory(grid=grid, values=arr[:, 1:], names=header[1:])
