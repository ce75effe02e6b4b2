"""Parameter fitting: prevalence observables, rejection ABC, local refinement.

The fitted quantity is per-species prevalence, M_i/(M_s + M_i), observed at a
set of sampling times for the first two species (human and bovine pools).
Ten parameters are treated as free: the contact, infection-probability, and
recovery rates of those two species, the snail contact and shedding rates,
and the two free-stage death rates. Everything else (demography, fecundity,
habitat) is taken as known and carried in a fixed parameter set.

Fitting runs in two stages:

- ``abc_rejection`` draws from a uniform box prior, simulates each draw, and
  keeps the fraction of draws closest to the observations in pooled RMSE;
  the kept cloud summarizes as per-parameter means, variances, and
  percentile intervals.
- ``refine_fit`` polishes a single vector by bounded derivative-free search
  (Powell) inside the same box; the objective is the squared distance
  through the full simulator, so no gradients are assumed.

Field observations arrive through ``load_prevalence_csv``; synthetic
benchmark data comes from ``synth_data``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .integrate import IntegrationError, TimeGrid
from .model import ModelParams, State
from .simulate import _as_state_vector, simulate_model

__all__ = [
    "FITTED_PARAMETER_NAMES",
    "CalibrationError",
    "PosteriorSample",
    "PrevalenceSeries",
    "PriorSpec",
    "RefineResult",
    "abc_rejection",
    "apply_fitted",
    "default_priors",
    "distance",
    "extract_fitted",
    "load_prevalence_csv",
    "refine_fit",
    "save_prevalence_csv",
    "simulate_prevalence",
    "synth_data",
]

FITTED_PARAMETER_NAMES = (
    "gamma_1", "beta_1", "omega_1",
    "gamma_2", "beta_2", "omega_2",
    "omega_s", "nu_s", "mu_e", "mu_l",
)

# squared-distance surrogate for draws that cannot be simulated at all;
# finite so bounded searches can walk back out of an infeasible corner
_PENALTY_SQ = 1e12

_CSV_HEADER = "time,human_prevalence,bovine_prevalence"


class CalibrationError(RuntimeError):
    """No usable draws or evaluations were produced."""


@dataclass(frozen=True)
class PrevalenceSeries:
    """Per-species prevalence sampled at increasing times (days)."""

    times: np.ndarray
    human_prevalence: np.ndarray
    bovine_prevalence: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        h = np.asarray(self.human_prevalence, dtype=float)
        b = np.asarray(self.bovine_prevalence, dtype=float)
        if not (t.shape == h.shape == b.shape) or t.ndim != 1 or t.size == 0:
            raise ValueError("times and both prevalence series must be equal-"
                             "length one-dimensional sequences")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("sampling times must be strictly increasing")
        for name, col in (("human", h), ("bovine", b)):
            if np.any(col < 0.0) or np.any(col > 1.0) or not np.all(np.isfinite(col)):
                raise ValueError(f"{name} prevalence values must lie in [0, 1]")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "human_prevalence", h)
        object.__setattr__(self, "bovine_prevalence", b)


@dataclass(frozen=True)
class PriorSpec:
    """Independent uniform box prior over the ten fitted parameters.

    Names are fixed to FITTED_PARAMETER_NAMES in that order. Bounds are not
    clipped to model feasibility; draws that violate a model constraint fail
    at simulation time and show up in the ABC diagnostics.
    """

    names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "names", tuple(self.names))
        if self.names != FITTED_PARAMETER_NAMES:
            raise ValueError(
                f"prior must cover exactly the fitted parameters "
                f"{FITTED_PARAMETER_NAMES}, got {self.names}")
        if lower.shape != (10,) or upper.shape != (10,):
            raise ValueError("lower and upper must each hold 10 bounds")
        if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)):
            raise ValueError("prior bounds must be finite")
        if np.any(lower >= upper):
            bad = [self.names[i] for i in np.flatnonzero(lower >= upper)]
            raise ValueError(f"lower bound >= upper bound for: {', '.join(bad)}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def midpoint(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    def contains(self, vector) -> bool:
        v = np.asarray(vector, dtype=float)
        return bool(v.shape == (10,) and np.all(v >= self.lower)
                    and np.all(v <= self.upper))

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)


def default_priors(params: ModelParams) -> PriorSpec:
    """Box prior [0, 4x] around each current fitted value.

    Upper bounds for the two infection probabilities are capped at 1, the
    largest value the model accepts, so the default prior is fully feasible.
    """
    vec = extract_fitted(params)
    upper = 4.0 * vec
    upper[1] = min(upper[1], 1.0)   # beta_1
    upper[4] = min(upper[4], 1.0)   # beta_2
    return PriorSpec(names=FITTED_PARAMETER_NAMES,
                     lower=np.zeros(10), upper=upper)


def extract_fitted(params: ModelParams) -> np.ndarray:
    """The ten fitted values of a parameter set, in canonical order."""
    if params.m < 2:
        raise ValueError("calibration needs at least two mammal species "
                         "(human and bovine pools)")
    hum, bov = params.species[0], params.species[1]
    sn, fr = params.snail, params.free
    return np.array([hum.gamma, hum.beta, hum.omega,
                     bov.gamma, bov.beta, bov.omega,
                     sn.omega_s, sn.nu_s, fr.mu_e, fr.mu_l])


def apply_fitted(params: ModelParams, vector) -> ModelParams:
    """A deep copy of ``params`` with the ten fitted values replaced."""
    v = np.asarray(vector, dtype=float)
    if v.shape != (10,):
        raise ValueError(f"fitted vector must hold 10 values, got shape {v.shape}")
    if params.m < 2:
        raise ValueError("calibration needs at least two mammal species "
                         "(human and bovine pools)")
    out = copy.deepcopy(params)
    hum, bov = out.species[0], out.species[1]
    hum.gamma, hum.beta, hum.omega = v[0], v[1], v[2]
    bov.gamma, bov.beta, bov.omega = v[3], v[4], v[5]
    out.snail.omega_s, out.snail.nu_s = v[6], v[7]
    out.free.mu_e, out.free.mu_l = v[8], v[9]
    return out


@dataclass(frozen=True)
class PosteriorSample:
    """Accepted ABC draws with their distances and run diagnostics."""

    names: tuple[str, ...]
    accepted: np.ndarray      # (k, 10) parameter vectors
    distances: np.ndarray     # (k,) pooled-RMSE distances
    threshold: float          # largest accepted distance
    n_draws: int
    n_failed: int

    def __post_init__(self) -> None:
        acc = np.asarray(self.accepted, dtype=float)
        dist = np.asarray(self.distances, dtype=float)
        if acc.ndim != 2 or acc.shape[1] != len(self.names) or acc.shape[0] != dist.size:
            raise ValueError("accepted must be (k, n_params) with k distances")
        if np.any(dist > self.threshold):
            raise ValueError("every accepted distance must be <= the threshold")
        object.__setattr__(self, "accepted", acc)
        object.__setattr__(self, "distances", dist)

    def mean(self) -> np.ndarray:
        return self.accepted.mean(axis=0)

    def variance(self) -> np.ndarray:
        # sample variance, matching a "mean (variance)" report
        if self.accepted.shape[0] < 2:
            return np.zeros(self.accepted.shape[1])
        return self.accepted.var(axis=0, ddof=1)

    def interval(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        if not 0.0 < level < 1.0:
            raise ValueError(f"interval level must lie in (0, 1), got {level}")
        tail = 100.0 * (1.0 - level) / 2.0
        lo = np.percentile(self.accepted, tail, axis=0)
        hi = np.percentile(self.accepted, 100.0 - tail, axis=0)
        return lo, hi

    def table(self) -> list[tuple[str, float, float]]:
        means, variances = self.mean(), self.variance()
        return [(n, float(m), float(v))
                for n, m, v in zip(self.names, means, variances)]


def simulate_prevalence(params: ModelParams, initial, times, *,
                        dt: float = 0.25, engine: str = "auto",
                        substeps="auto") -> PrevalenceSeries:
    """Prevalence of the first two species at the requested times.

    Simulates on a uniform grid no coarser than ``dt`` covering [0, max
    time] and linearly interpolates the per-species ratio M_i/(M_s + M_i)
    at the sampling times; times where a pool is empty report 0.
    """
    if params.m < 2:
        raise ValueError("prevalence output needs at least two mammal "
                         "species (human and bovine pools)")
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) <= 0.0):
        raise ValueError("times must be a strictly increasing sequence")
    if t[0] < 0.0:
        raise ValueError("times must start at or after 0")

    t_end = float(t[-1])
    if t_end == 0.0:
        x = _as_state_vector(initial, params)
        values = x[None, :]
        node_times = np.array([0.0])
    else:
        n = max(1, int(np.ceil(t_end / dt)))
        grid = TimeGrid(t0=0.0, t_end=t_end, dt=t_end / n)
        traj = simulate_model(params, initial, grid, engine=engine,
                              substeps=substeps)
        values = traj.values
        node_times = grid.points()

    cols = []
    for j in (0, 1):
        num = values[:, 5 + 2 * j]
        den = values[:, 4 + 2 * j] + num
        with np.errstate(divide="ignore", invalid="ignore"):
            prev = np.where(den > 0.0, num / den, 0.0)
        cols.append(np.interp(t, node_times, prev))
    # interpolation of values in [0,1] stays in [0,1] up to round-off
    h, b = (np.clip(c, 0.0, 1.0) for c in cols)
    return PrevalenceSeries(times=t, human_prevalence=h, bovine_prevalence=b)


def distance(sim: PrevalenceSeries, obs: PrevalenceSeries) -> float:
    """Root-mean-square error pooled over both species, equal weighting."""
    if not np.array_equal(sim.times, obs.times):
        raise ValueError("prevalence series are on different time grids")
    resid = np.concatenate([sim.human_prevalence - obs.human_prevalence,
                            sim.bovine_prevalence - obs.bovine_prevalence])
    return float(np.sqrt(np.mean(resid ** 2)))


def synth_data(params: ModelParams, initial, times, noise_sd: float,
               seed, *, dt: float = 0.25,
               engine: str = "auto") -> PrevalenceSeries:
    """Simulated prevalence plus seeded Gaussian noise, clipped to [0, 1]."""
    if noise_sd < 0.0:
        raise ValueError(f"noise_sd must be >= 0, got {noise_sd}")
    clean = simulate_prevalence(params, initial, times, dt=dt, engine=engine)
    if noise_sd == 0.0:
        return clean
    rng = np.random.default_rng(seed)
    h = np.clip(clean.human_prevalence
                + rng.normal(0.0, noise_sd, clean.times.size), 0.0, 1.0)
    b = np.clip(clean.bovine_prevalence
                + rng.normal(0.0, noise_sd, clean.times.size), 0.0, 1.0)
    return PrevalenceSeries(times=clean.times, human_prevalence=h,
                            bovine_prevalence=b)


def _try_distance_sq(vector: np.ndarray, fixed_params: ModelParams,
                     initial, obs: PrevalenceSeries, dt: float,
                     engine: str) -> float:
    """Squared distance of one fitted vector, or the penalty on failure."""
    try:
        trial = apply_fitted(fixed_params, vector)
        sim = simulate_prevalence(trial, initial, obs.times, dt=dt,
                                  engine=engine)
        d = distance(sim, obs)
    except (ValueError, IntegrationError, FloatingPointError, OverflowError):
        return _PENALTY_SQ
    if not np.isfinite(d):
        return _PENALTY_SQ
    return d * d


def abc_rejection(prior: PriorSpec, obs: PrevalenceSeries,
                  fixed_params: ModelParams, n_draws: int,
                  accept_fraction: float, seed, *, initial,
                  dt: float = 0.25, engine: str = "auto") -> PosteriorSample:
    """Rejection ABC: keep the accept_fraction closest draws from the prior.

    Each draw uses its own child seed of ``seed``, so the draw sequence is
    reproducible and independent of how failures interleave. Draws that
    cannot be simulated (invalid parameters, blow-up) are discarded and
    counted in ``n_failed``.
    """
    if n_draws < 100:
        raise ValueError(f"n_draws must be >= 100, got {n_draws}")
    if not 0.0 < accept_fraction <= 0.5:
        raise ValueError(
            f"accept_fraction must lie in (0, 0.5], got {accept_fraction}")
    children = np.random.SeedSequence(seed).spawn(n_draws)
    vectors: list[np.ndarray] = []
    dists: list[float] = []
    n_failed = 0
    for child in children:
        vec = prior.draw(np.random.default_rng(child))
        d_sq = _try_distance_sq(vec, fixed_params, initial, obs, dt, engine)
        if d_sq >= _PENALTY_SQ:
            n_failed += 1
            continue
        vectors.append(vec)
        dists.append(float(np.sqrt(d_sq)))
    if not vectors:
        raise CalibrationError(
            f"all {n_draws} prior draws failed to simulate; the prior box "
            "or the fixed parameters are inconsistent with the model")

    keep = max(1, int(round(accept_fraction * n_draws)))
    keep = min(keep, len(vectors))
    dist_arr = np.asarray(dists)
    order = np.argsort(dist_arr, kind="stable")[:keep]
    accepted = np.asarray(vectors)[order]
    accepted_d = dist_arr[order]
    return PosteriorSample(names=prior.names, accepted=accepted,
                           distances=accepted_d,
                           threshold=float(accepted_d.max()),
                           n_draws=n_draws, n_failed=n_failed)


@dataclass(frozen=True)
class RefineResult:
    """Outcome of a local refinement run."""

    parameters: np.ndarray
    distance: float
    start_distance: float
    n_evaluations: int

    @property
    def improved(self) -> bool:
        return self.distance < self.start_distance


def refine_fit(start, obs: PrevalenceSeries, fixed_params: ModelParams, *,
               prior: PriorSpec, initial, dt: float = 0.25,
               engine: str = "auto",
               max_evaluations: int = 4000) -> RefineResult:
    """Polish one fitted vector by bounded Powell search inside the prior box.

    Minimizes the squared pooled-RMSE distance. The result never has a
    larger distance than the start: a non-improving search returns the
    start point unchanged.
    """
    x0 = np.asarray(start, dtype=float)
    if not prior.contains(x0):
        raise ValueError("start vector lies outside the prior box")

    evals = 0

    def objective(vec: np.ndarray) -> float:
        nonlocal evals
        evals += 1
        return _try_distance_sq(np.asarray(vec, dtype=float), fixed_params,
                                initial, obs, dt, engine)

    start_sq = objective(x0)
    if start_sq >= _PENALTY_SQ:
        raise CalibrationError("the start vector cannot be simulated")
    start_distance = float(np.sqrt(start_sq))

    res = minimize(objective, x0, method="Powell",
                   bounds=list(zip(prior.lower, prior.upper)),
                   options={"maxfev": max_evaluations,
                            "xtol": 1e-8, "ftol": 1e-12})
    candidate = np.clip(np.asarray(res.x, dtype=float),
                        prior.lower, prior.upper)
    final_sq = _try_distance_sq(candidate, fixed_params, initial, obs, dt,
                                engine)
    final_distance = float(np.sqrt(final_sq)) if final_sq < _PENALTY_SQ else np.inf
    if final_distance <= start_distance:
        return RefineResult(parameters=candidate, distance=final_distance,
                            start_distance=start_distance,
                            n_evaluations=evals)
    return RefineResult(parameters=x0, distance=start_distance,
                        start_distance=start_distance, n_evaluations=evals)


def save_prevalence_csv(series: PrevalenceSeries, path) -> None:
    """Write a prevalence series as time,human,bovine with LF endings."""
    lines = [_CSV_HEADER]
    for t, h, b in zip(series.times, series.human_prevalence,
                       series.bovine_prevalence):
        lines.append(f"{t:.17g},{h:.17g},{b:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def load_prevalence_csv(path) -> PrevalenceSeries:
    """Read a prevalence series written by save_prevalence_csv."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != _CSV_HEADER:
        raise ValueError(f"expected header {_CSV_HEADER!r} in {path}")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}:{i}: expected 3 comma-separated values")
        try:
            rows.append(tuple(float(v) for v in parts))
        except ValueError as exc:
            raise ValueError(f"{path}:{i}: {exc}") from exc
    if not rows:
        raise ValueError(f"{path} holds no data rows")
    arr = np.asarray(rows)
    return PrevalenceSeries(times=arr[:, 0], human_prevalence=arr[:, 1],
                            bovine_prevalence=arr[:, 2])
