"""Model simulation entry point: control grids, substep sizing, engine dispatch.

Controls over a run are held as an array U of shape (n+1, 3+m): node values
of [u_a, u_s, u_k, u_m1..u_mm] on the output grid, interpolated linearly in
time inside each step. ``simulate_model`` accepts that array, a constant
:class:`~schistoctl.model.ControlValue`, or None for the uncontrolled system.

Two engines produce the same trajectories: a compiled kernel path (default
when available) and a plain-python reference path built directly on
``model.rhs_controlled``, kept for cross-checking the kernels.
"""

from __future__ import annotations

from typing import Union

import numpy as np

from .integrate import IntegrationError, TimeGrid, Trajectory, integrate_forward
from .model import (
    ControlValue,
    DomainBounds,
    ModelParams,
    State,
    domain_bounds,
    rhs_controlled,
)

try:
    from . import _kernels
    _HAVE_FAST = True
except ImportError:  # bare environment without a compiler toolchain
    _kernels = None
    _HAVE_FAST = False

__all__ = [
    "SAFETY",
    "simulate_model",
    "neutral_controls",
    "controls_to_array",
    "component_scales",
    "pack_snail_free",
]

# classical RK4 is stable up to rate * h of about 2.785 on the linear loss
# part; sizing substeps against this margin keeps a cushion for the rates
# picked up while a step is in flight
SAFETY = 2.2

Controls = Union[None, ControlValue, np.ndarray]


def pack_snail_free(params: ModelParams) -> np.ndarray:
    """Snail and free-stage rates in the flat layout the kernels use."""
    sn, fr = params.snail, params.free
    return np.array([sn.alpha_s, sn.mu_s, sn.kappa_s, sn.gamma_s, sn.beta_s,
                     sn.omega_s, sn.nu_s, fr.mu_e, fr.mu_l])


def neutral_controls(grid: TimeGrid, m: int) -> np.ndarray:
    """Control array of the uncontrolled system (u_k = 1, all rates 0)."""
    U = np.zeros((grid.n + 1, 3 + m))
    U[:, 2] = 1.0
    return U


def controls_to_array(controls: Controls, grid: TimeGrid,
                      params: ModelParams) -> np.ndarray:
    """Normalize a controls argument to a validated (n+1, 3+m) array."""
    if controls is None:
        return neutral_controls(grid, params.m)
    if isinstance(controls, ControlValue):
        controls.validate(params)
        row = np.concatenate((
            [controls.u_a, controls.u_s, controls.u_k],
            np.asarray(controls.u_m, dtype=float)))
        return np.tile(row, (grid.n + 1, 1))
    U = np.ascontiguousarray(controls, dtype=float)
    expected = (grid.n + 1, 3 + params.m)
    if U.shape != expected:
        raise ValueError(f"controls array must have shape {expected}, got {U.shape}")
    if not np.all(np.isfinite(U)):
        raise ValueError("controls array contains non-finite entries")
    if np.any(U[:, 2] <= 0.0):
        raise ValueError("u_k column must stay positive (u_k = 1 is neutral)")
    if np.any(U[:, :2] < 0.0) or np.any(U[:, 3:] < 0.0):
        raise ValueError("rate control channels must be nonnegative")
    for j, spc in enumerate(params.species):
        if not spc.controlled and np.any(U[:, 3 + j] != 0.0):
            raise ValueError(
                f"treatment column set for uncontrolled species {spc.name!r}")
    return U


def component_scales(bounds: DomainBounds, m: int) -> np.ndarray:
    """Per-component magnitude scale derived from the domain ceilings."""
    sc = np.empty(2 * m + 4)
    sc[0] = bounds.egg
    sc[1] = sc[2] = bounds.snail
    sc[3] = bounds.larva
    for j in range(m):
        sc[4 + 2 * j] = sc[5 + 2 * j] = bounds.mammal[j]
    return sc


def _rate_bound_py(x: np.ndarray, sp: np.ndarray, sa: dict,
                   u_row: np.ndarray) -> float:
    # python mirror of _kernels.rate_bound, for the reference engine
    E, Ss, Si, L = x[0], x[1], x[2], x[3]
    S = Ss + Si
    ua, us, uk = u_row[0], u_row[1], u_row[2]
    graze = float(sa["omega"] @ x[4::2])
    r = max(
        sp[5] * Ss + sp[7] + ua,
        sp[5] * sp[4] * E + sp[0] * (1.0 + 2.0 * uk * S / sp[2]) + sp[1] + us,
        sp[1] + sp[3] + us,
        graze + sp[8] + ua,
    )
    per_species = (sa["omega"] * sa["beta"] * L + sa["mu"] + sa["gamma"]
                   + u_row[3:])
    return max(r, float(np.max(per_species)))


def _as_state_vector(initial, params: ModelParams) -> np.ndarray:
    x0 = initial.to_vector() if isinstance(initial, State) else initial
    x0 = np.array(x0, dtype=float)
    if x0.shape != (params.dim,):
        raise ValueError(
            f"initial state must have shape ({params.dim},), got {x0.shape}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state contains non-finite components")
    return x0


def simulate_model(
    params: ModelParams,
    initial,
    grid: TimeGrid,
    controls: Controls = None,
    *,
    substeps: Union[str, int] = "auto",
    engine: str = "auto",
    bounds: DomainBounds | None = None,
) -> Trajectory:
    """Simulate the (possibly controlled) model over an output grid.

    Args:
        params: full parameter set; validated before the run.
        initial: start state as a flat vector or :class:`State`.
        grid: output grid; one state row is stored per grid point.
        controls: None (uncontrolled), a constant :class:`ControlValue`, or a
            node-value array of shape (n+1, 3+m).
        substeps: "auto" sizes the substep count per output step from the
            current loss rates; an int forces that count everywhere.
        engine: "auto" picks the compiled path when available, "fast" demands
            it, "reference" runs the plain-python integrator directly on
            ``model.rhs_controlled``.
        bounds: domain ceilings used to scale the negativity clamp band;
            computed from the initial state when omitted.

    Returns:
        Trajectory with one named column per state component.

    Raises:
        IntegrationError: if the state leaves the finite nonnegative regime,
            which for a start inside the invariant domain means the effective
            step is too coarse for the stiffness of the current state.
    """
    params.validate()
    x0 = _as_state_vector(initial, params)
    U = controls_to_array(controls, grid, params)
    b = bounds if bounds is not None else domain_bounds(params, x0)
    scales = component_scales(b, params.m)

    if substeps != "auto":
        substeps = int(substeps)
        if substeps < 1:
            raise ValueError(f"substep count must be >= 1, got {substeps}")

    if engine == "auto":
        engine = "fast" if _HAVE_FAST else "reference"
    if engine == "fast":
        if not _HAVE_FAST:
            raise RuntimeError("compiled kernels are unavailable in this environment")
        return _run_fast(params, x0, grid, U, scales, substeps)
    if engine == "reference":
        return _run_reference(params, x0, grid, U, scales, substeps)
    raise ValueError(f"unknown engine {engine!r}")


def _run_fast(params, x0, grid, U, scales, substeps) -> Trajectory:
    sp = pack_snail_free(params)
    sa = params.species_arrays()
    eps = 1e-12 * (1.0 + np.abs(scales))
    out = np.empty((grid.n + 1, params.dim))
    nsub_fixed = 0 if substeps == "auto" else substeps
    status, step = _kernels.forward_model(
        x0, grid.dt, grid.n, sp, sa["alpha"], sa["mu"], sa["theta"],
        sa["gamma"], sa["beta"], sa["omega"], U, eps, nsub_fixed, SAFETY, out)
    if status == _kernels.STATUS_NEGATIVE:
        raise IntegrationError(
            f"a component went negative beyond tolerance at step {step}; dt "
            f"(or the substep count) is too coarse for the current rates",
            step=step)
    if status == _kernels.STATUS_NONFINITE:
        raise IntegrationError(
            f"non-finite state while computing step {step}", step=step)
    return Trajectory(grid=grid, values=out, names=params.state_names())


def _run_reference(params, x0, grid, U, scales, substeps) -> Trajectory:
    def u_at(t: float) -> ControlValue:
        k = min(max(int(np.floor((t - grid.t0) / grid.dt)), 0), grid.n - 1)
        f = (t - (grid.t0 + k * grid.dt)) / grid.dt
        f = min(max(f, 0.0), 1.0)
        row = (1.0 - f) * U[k] + f * U[k + 1]
        return ControlValue(u_a=row[0], u_s=row[1], u_k=row[2],
                            u_m=tuple(row[3:]))

    def rhs(x: np.ndarray, t: float) -> np.ndarray:
        return rhs_controlled(x, params, u_at(t))

    if substeps == "auto":
        sp = pack_snail_free(params)
        sa = params.species_arrays()

        def substeps_cb(t: float, x: np.ndarray) -> int:
            k = min(int(round((t - grid.t0) / grid.dt)), grid.n - 1)
            r = max(_rate_bound_py(x, sp, sa, U[k]),
                    _rate_bound_py(x, sp, sa, U[k + 1]))
            return int(np.ceil(grid.dt * r / SAFETY)) + 1

        sub = substeps_cb
    else:
        sub = substeps

    traj = integrate_forward(rhs, x0, grid, substeps=sub,
                             component_bounds=scales, nonneg=True)
    return Trajectory(grid=grid, values=traj.values, names=params.state_names())
