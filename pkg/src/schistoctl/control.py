"""Optimal control: objective, costate system, characterization, sweep.

The control problem minimizes the integral of infected controlled mammals
plus quadratic channel costs, subject to the controlled transmission
dynamics and box bounds on every channel. Pontryagin's principle reduces it
to a two-point boundary value problem: state forward, costate backward from
a zero terminal vector, controls recovered pointwise by clamping the
stationarity values of the Hamiltonian. ``forward_backward_sweep`` iterates
those three maps with relaxation until the controls stop moving.

Conventions:

- the mechanical channel u_k is neutral at 1 (it divides the snail carrying
  capacity) and its running cost is charged on the deviation (u_k - 1)**2,
  so doing nothing costs nothing;
- uncontrolled species have no control channel and no running-cost term but
  participate fully in the dynamics and the costate system;
- channel weights and bounds are indexed over controlled species, in species
  order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .integrate import IntegrationError, TimeGrid, Trajectory, integrate_backward
from .model import ControlValue, ModelParams, State, domain_bounds, rhs_controlled
from .simulate import (
    SAFETY,
    _HAVE_FAST,
    _as_state_vector,
    _rate_bound_py,
    neutral_controls,
    pack_snail_free,
    simulate_model,
)

if _HAVE_FAST:
    from . import _kernels

__all__ = [
    "AdjointTrajectory",
    "ControlBounds",
    "ControlTrajectory",
    "ControlWeights",
    "SweepConfig",
    "SweepError",
    "SweepResult",
    "adjoint_rhs",
    "characterize_controls",
    "forward_backward_sweep",
    "hamiltonian",
    "objective",
]


class SweepError(RuntimeError):
    """The sweep produced a non-finite objective."""


@dataclass
class ControlWeights:
    """Positive quadratic cost weights, one per channel.

    a_m is indexed over controlled species in species order.
    """

    a_a: float
    a_s: float
    a_k: float
    a_m: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        self.a_m = tuple(float(v) for v in self.a_m)

    def validate_for(self, params: ModelParams) -> None:
        for name in ("a_a", "a_s", "a_k"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"control weight {name} must be positive "
                                 "(it divides in the characterization)")
        n_ctrl = len(params.controlled_indices())
        if len(self.a_m) != n_ctrl:
            raise ValueError(
                f"a_m has {len(self.a_m)} entries but the model has "
                f"{n_ctrl} controlled species")
        if any(not v > 0.0 for v in self.a_m):
            raise ValueError("all per-species control weights must be positive")


@dataclass
class ControlBounds:
    """Box bounds and activity flags, one per channel.

    Inactive channels are pinned at their neutral value (0 for the rate
    channels, 1 for the capacity channel) regardless of the costate.
    u_m_max and active_m are indexed over controlled species in species
    order.
    """

    u_a_max: float = 0.0
    u_s_max: float = 0.0
    u_k_max: float = 1.0
    u_m_max: tuple[float, ...] = ()
    active_a: bool = False
    active_s: bool = False
    active_k: bool = False
    active_m: tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        self.u_m_max = tuple(float(v) for v in self.u_m_max)
        self.active_m = tuple(bool(v) for v in self.active_m)

    def validate_for(self, params: ModelParams) -> None:
        if self.u_a_max < 0.0 or self.u_s_max < 0.0:
            raise ValueError("rate-channel upper bounds must be >= 0")
        if self.u_k_max < 1.0:
            raise ValueError("u_k_max must be >= 1 (1 leaves the carrying "
                             "capacity untouched)")
        if any(v < 0.0 for v in self.u_m_max):
            raise ValueError("treatment upper bounds must be >= 0")
        n_ctrl = len(params.controlled_indices())
        if len(self.u_m_max) != n_ctrl or len(self.active_m) != n_ctrl:
            raise ValueError(
                f"u_m_max/active_m must have one entry per controlled "
                f"species ({n_ctrl}), got {len(self.u_m_max)}/{len(self.active_m)}")


def _control_names(m: int) -> tuple[str, ...]:
    return ("u_a", "u_s", "u_k") + tuple(f"u_m{j + 1}" for j in range(m))


@dataclass(frozen=True, eq=False)
class ControlTrajectory:
    """Node values of every control channel on an output grid.

    Columns: u_a, u_s, u_k, then one treatment column per species
    (uncontrolled species' columns stay 0).
    """

    grid: TimeGrid
    values: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != self.grid.n + 1 or values.shape[1] < 4:
            raise ValueError(
                f"control values must have shape ({self.grid.n + 1}, 3+m), "
                f"got {values.shape}")
        object.__setattr__(self, "values", values)
        if not self.names:
            object.__setattr__(self, "names", _control_names(values.shape[1] - 3))


@dataclass(frozen=True, eq=False)
class AdjointTrajectory:
    """Costate vectors on an output grid, one row per node.

    The terminal row is identically zero (transversality).
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != self.grid.n + 1:
            raise ValueError(
                f"adjoint values must have shape ({self.grid.n + 1}, dim), "
                f"got {values.shape}")
        if np.any(values[-1] != 0.0):
            raise ValueError("terminal costate vector must be identically zero")
        object.__setattr__(self, "values", values)


@dataclass
class SweepConfig:
    """Iteration settings for the forward-backward sweep."""

    rho: float = 0.5
    tol: float = 1e-4
    max_iterations: int = 500
    engine: str = "auto"
    substeps: Union[str, int] = "auto"

    def __post_init__(self) -> None:
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"relaxation factor must be in (0, 1], got {self.rho}")
        if not self.tol > 0.0:
            raise ValueError(f"tolerance must be positive, got {self.tol}")
        if self.max_iterations < 1:
            raise ValueError("at least one iteration is required")


@dataclass(frozen=True)
class SweepResult:
    """Converged (or capped) sweep output.

    objective_history holds one value per iteration (the objective of the
    state/control pair actually simulated in that iteration) plus a final
    entry for the returned, mutually consistent state/control/adjoint
    triple, so its length is iterations + 1.
    """

    controls: ControlTrajectory
    state: Trajectory
    adjoint: AdjointTrajectory
    objective_history: tuple[float, ...]
    converged: bool
    iterations: int
    final_change: float


def _objective_arrays(X: np.ndarray, U: np.ndarray, dt: float,
                      weights: ControlWeights, controlled: Sequence[int]) -> float:
    integrand = np.zeros(X.shape[0])
    for c, j in enumerate(controlled):
        integrand += X[:, 5 + 2 * j]
        integrand += weights.a_m[c] * U[:, 3 + j] ** 2
    integrand += weights.a_a * U[:, 0] ** 2
    integrand += weights.a_s * U[:, 1] ** 2
    integrand += weights.a_k * (U[:, 2] - 1.0) ** 2
    return float(np.trapezoid(integrand, dx=dt))


def objective(state: Trajectory, controls: ControlTrajectory,
              weights: ControlWeights, controlled: Sequence[int]) -> float:
    """Composite-trapezoid value of the running cost over the horizon.

    Only the species listed in ``controlled`` contribute infected counts and
    treatment costs; the mechanical cost is charged on (u_k - 1)**2.
    """
    if state.grid != controls.grid:
        raise ValueError("state and controls must share one grid")
    m = controls.values.shape[1] - 3
    if state.values.shape[1] != 2 * m + 4:
        raise ValueError(
            f"state dimension {state.values.shape[1]} does not match the "
            f"{m}-species control layout")
    controlled = list(controlled)
    if len(weights.a_m) != len(controlled):
        raise ValueError("one a_m weight per controlled species is required")
    if any(not 0 <= j < m for j in controlled):
        raise ValueError(f"controlled species indices must lie in [0, {m})")
    return _objective_arrays(state.values, controls.values, state.grid.dt,
                             weights, controlled)


def hamiltonian(state, lam, u: ControlValue, params: ModelParams,
                weights: ControlWeights) -> float:
    """Running cost plus costate-weighted dynamics at one time point."""
    x = state.to_vector() if isinstance(state, State) else np.asarray(state, dtype=float)
    lam = np.asarray(lam, dtype=float)
    controlled = params.controlled_indices()
    u_m = np.asarray(u.u_m, dtype=float)
    if u_m.size == 0:
        u_m = np.zeros(params.m)
    cost = weights.a_a * u.u_a ** 2 + weights.a_s * u.u_s ** 2
    cost += weights.a_k * (u.u_k - 1.0) ** 2
    for c, j in enumerate(controlled):
        cost += x[5 + 2 * j] + weights.a_m[c] * u_m[j] ** 2
    return cost + float(lam @ rhs_controlled(x, params, u))


def adjoint_rhs(lam, state, u: ControlValue, params: ModelParams) -> np.ndarray:
    """Costate vector field: the negative state gradient of the Hamiltonian.

    Controlled species carry the running-cost seed -1 on their infected
    compartment; every species couples the cercaria costate through its
    grazing and uptake terms.
    """
    x = state.to_vector() if isinstance(state, State) else np.asarray(state, dtype=float)
    lam = np.asarray(lam, dtype=float)
    sn, fr = params.snail, params.free
    arr = params.species_arrays()
    m = params.m
    u_m = np.asarray(u.u_m, dtype=float)
    if u_m.size == 0:
        u_m = np.zeros(m)
    if u_m.size != m:
        raise ValueError(f"u_m must carry one entry per species ({m})")
    E, Ss, Si, L = x[0], x[1], x[2], x[3]
    Ms = x[4::2]
    ls, li = lam[4::2], lam[5::2]
    S = Ss + Si
    two_over_cap = 2.0 * S * u.u_k / sn.kappa_s
    ctrl = np.array([1.0 if s.controlled else 0.0 for s in params.species])

    dl = np.empty(2 * m + 4)
    dl[0] = ((sn.omega_s * Ss + fr.mu_e + u.u_a) * lam[0]
             + sn.omega_s * sn.beta_s * Ss * (lam[1] - lam[2]))
    dl[1] = (sn.omega_s * E * lam[0]
             + (sn.omega_s * sn.beta_s * E - sn.alpha_s * (1.0 - two_over_cap)
                + sn.mu_s + u.u_s) * lam[1]
             - sn.omega_s * sn.beta_s * E * lam[2])
    dl[2] = (sn.alpha_s * (two_over_cap - 1.0) * lam[1]
             + (sn.mu_s + sn.gamma_s + u.u_s) * lam[2] - sn.nu_s * lam[3])
    dl[3] = ((float(arr["omega"] @ Ms) + fr.mu_l + u.u_a) * lam[3]
             + float(np.sum(arr["omega"] * arr["beta"] * Ms * (ls - li))))
    dl[4::2] = (arr["omega"] * L * lam[3]
                + (arr["omega"] * arr["beta"] * L + arr["mu"]) * ls
                - arr["omega"] * arr["beta"] * L * li)
    dl[5::2] = (-ctrl - arr["theta"] * lam[0]
                + (arr["mu"] + arr["gamma"] + u_m) * li)
    return dl


def _characterize_arrays(X: np.ndarray, LAM: np.ndarray, params: ModelParams,
                         weights: ControlWeights,
                         bounds: ControlBounds) -> np.ndarray:
    sn = params.snail
    n1 = X.shape[0]
    U = np.zeros((n1, 3 + params.m))
    U[:, 2] = 1.0
    if bounds.active_a:
        raw = (LAM[:, 0] * X[:, 0] + LAM[:, 3] * X[:, 3]) / (2.0 * weights.a_a)
        U[:, 0] = np.clip(raw, 0.0, bounds.u_a_max)
    if bounds.active_s:
        raw = (LAM[:, 1] * X[:, 1] + LAM[:, 2] * X[:, 2]) / (2.0 * weights.a_s)
        U[:, 1] = np.clip(raw, 0.0, bounds.u_s_max)
    if bounds.active_k:
        s_tot = X[:, 1] + X[:, 2]
        raw = 1.0 + LAM[:, 1] * sn.alpha_s * s_tot ** 2 / (2.0 * sn.kappa_s * weights.a_k)
        U[:, 2] = np.clip(raw, 1.0, bounds.u_k_max)
    for c, j in enumerate(params.controlled_indices()):
        if bounds.active_m[c]:
            raw = LAM[:, 5 + 2 * j] * X[:, 5 + 2 * j] / (2.0 * weights.a_m[c])
            U[:, 3 + j] = np.clip(raw, 0.0, bounds.u_m_max[c])
    return U


def characterize_controls(state, lam, params: ModelParams,
                          weights: ControlWeights,
                          bounds: ControlBounds) -> ControlValue:
    """Pointwise optimal controls: clamped Hamiltonian stationarity values.

    u_a, u_s and the treatment channels clamp (costate-weighted removal
    benefit)/(2 weight) into [0, max]; the capacity channel clamps
    1 + lam_2 alpha_s (S_s+S_i)^2 / (2 kappa_s a_k) into [1, max]. Inactive
    channels return their neutral value.
    """
    weights.validate_for(params)
    bounds.validate_for(params)
    x = state.to_vector() if isinstance(state, State) else np.asarray(state, dtype=float)
    lam = np.asarray(lam, dtype=float)
    row = _characterize_arrays(x[None, :], lam[None, :], params, weights, bounds)[0]
    return ControlValue(u_a=float(row[0]), u_s=float(row[1]), u_k=float(row[2]),
                        u_m=tuple(float(v) for v in row[3:]))


def _solve_adjoint(params: ModelParams, X: np.ndarray, U: np.ndarray,
                   grid: TimeGrid, engine: str,
                   substeps: Union[str, int]) -> np.ndarray:
    if engine == "auto":
        engine = "fast" if _HAVE_FAST else "reference"
    nsub_fixed = 0 if substeps == "auto" else int(substeps)
    sp = pack_snail_free(params)
    sa = params.species_arrays()
    ctrl = np.array([1.0 if s.controlled else 0.0 for s in params.species])

    if engine == "fast":
        if not _HAVE_FAST:
            raise RuntimeError("compiled kernels are unavailable in this environment")
        out = np.empty((grid.n + 1, params.dim))
        status, step = _kernels.backward_adjoint(
            X, U, grid.dt, grid.n, sp, sa["alpha"], sa["mu"], sa["theta"],
            sa["gamma"], sa["beta"], sa["omega"], ctrl, nsub_fixed, SAFETY, out)
        if status == _kernels.STATUS_NONFINITE:
            raise IntegrationError(
                f"non-finite costate while computing step {step}: the output "
                "dt (or the substep count) is too coarse for the stiffness "
                "of this trajectory", step=step)
        return out
    if engine != "reference":
        raise ValueError(f"unknown engine {engine!r}")

    t0, dt, n = grid.t0, grid.dt, grid.n

    def interp(A: np.ndarray, t: float) -> np.ndarray:
        f = (t - t0) / dt
        k = min(max(int(np.floor(f)), 0), n - 1)
        w = f - k
        return A[k] * (1.0 - w) + A[k + 1] * w

    def rhs(lam: np.ndarray, t: float) -> np.ndarray:
        x = interp(X, t)
        u_row = interp(U, t)
        cv = ControlValue(u_a=float(u_row[0]), u_s=float(u_row[1]),
                          u_k=float(u_row[2]),
                          u_m=tuple(float(v) for v in u_row[3:]))
        return adjoint_rhs(lam, x, cv, params)

    def substeps_cb(t: float, _lam: np.ndarray) -> int:
        k = min(max(int(round((t - t0) / dt)), 0), n)
        lo = max(k - 1, 0)
        r = max(_rate_bound_py(X[lo], sp, sa, U[lo]),
                _rate_bound_py(X[k], sp, sa, U[k]))
        return int(np.ceil(dt * r / SAFETY)) + 1

    traj = integrate_backward(
        rhs, np.zeros(params.dim), grid,
        substeps=substeps_cb if nsub_fixed < 1 else nsub_fixed)
    return traj.values


def _max_channel_change(new: np.ndarray, old: np.ndarray) -> float:
    change = 0.0
    for c in range(new.shape[1]):
        neutral = 1.0 if c == 2 else 0.0
        num = float(np.sum(np.abs(new[:, c] - old[:, c])))
        if num == 0.0:
            continue
        den = max(float(np.sum(np.abs(new[:, c] - neutral))), 1e-12)
        change = max(change, num / den)
    return change


def forward_backward_sweep(params: ModelParams, initial, grid: TimeGrid,
                           weights: ControlWeights, bounds: ControlBounds,
                           config: SweepConfig | None = None) -> SweepResult:
    """Solve the control problem by relaxed forward-backward iteration.

    Each iteration simulates the state under the current controls, solves
    the costate system backward from zero, characterizes pointwise optimal
    controls, and blends them in with relaxation factor rho. Iteration stops
    when the largest relative L1 control change falls to tol, or at the
    iteration cap (converged=False). A final forward/backward pass makes the
    returned state, adjoint, and controls mutually consistent.
    """
    cfg = config if config is not None else SweepConfig()
    params.validate()
    weights.validate_for(params)
    bounds.validate_for(params)
    x0 = _as_state_vector(initial, params)
    controlled = params.controlled_indices()
    dom = domain_bounds(params, x0)

    U = neutral_controls(grid, params.m)
    history: list[float] = []
    converged = False
    final_change = np.inf
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        traj = simulate_model(params, x0, grid, controls=U,
                              substeps=cfg.substeps, engine=cfg.engine,
                              bounds=dom)
        lam_values = _solve_adjoint(params, traj.values, U, grid,
                                    cfg.engine, cfg.substeps)
        j_value = _objective_arrays(traj.values, U, grid.dt, weights, controlled)
        if not np.isfinite(j_value):
            raise SweepError(f"objective became non-finite at iteration {iterations}")
        history.append(j_value)
        u_char = _characterize_arrays(traj.values, lam_values, params,
                                      weights, bounds)
        u_new = (1.0 - cfg.rho) * U + cfg.rho * u_char
        final_change = _max_channel_change(u_new, U)
        U = u_new
        if final_change <= cfg.tol:
            converged = True
            break

    traj = simulate_model(params, x0, grid, controls=U, substeps=cfg.substeps,
                          engine=cfg.engine, bounds=dom)
    lam_values = _solve_adjoint(params, traj.values, U, grid, cfg.engine,
                                cfg.substeps)
    j_value = _objective_arrays(traj.values, U, grid.dt, weights, controlled)
    if not np.isfinite(j_value):
        raise SweepError("objective became non-finite on the final pass")
    history.append(j_value)

    return SweepResult(
        controls=ControlTrajectory(grid=grid, values=U,
                                   names=_control_names(params.m)),
        state=traj,
        adjoint=AdjointTrajectory(grid=grid, values=lam_values),
        objective_history=tuple(history),
        converged=converged,
        iterations=iterations,
        final_change=final_change,
    )
