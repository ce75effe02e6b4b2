"""Parameter records, state layout, and right-hand sides of the transmission model.

The state is a flat vector with a fixed component ordering shared by every
module in the package:

    [E, S_s, S_i, L, M_1_s, M_1_i, ..., M_m_s, M_m_i]

E is the free egg/miracidium pool, S_s / S_i the susceptible / infected snail
populations, L the free cercaria pool, and each mammal species j contributes a
susceptible and an infected compartment. Counts are continuous nonnegative
reals; the model is a deterministic ODE with no demographic stochasticity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "SpeciesParams", "SnailParams", "FreeStageParams", "ModelParams",
    "State", "ControlValue", "DomainBounds",
    "rhs_uncontrolled", "rhs_controlled", "domain_bounds", "check_in_domain",
    "default_params", "params_to_dict", "params_from_dict",
]


@dataclass
class SpeciesParams:
    """Rate constants for one definitive-host (mammal) species.

    alpha is a constant recruitment inflow in individuals per day (not a
    per-capita rate): the susceptible equation gains a bare `+ alpha` term, so
    the uninfected population relaxes to alpha/mu.
    """

    name: str
    alpha: float      # recruitment inflow (individuals/day)
    mu: float         # natural death rate (1/day)
    theta: float      # oviposition rate (eggs/day per infected individual)
    gamma: float      # disease-induced death rate (1/day)
    beta: float       # infection probability per contact (dimensionless)
    omega: float      # contact rate with cercariae (1/day per larva)
    controlled: bool = False

    def validate(self) -> None:
        for label in ("alpha", "mu", "theta", "gamma", "beta", "omega"):
            v = getattr(self, label)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"species {self.name!r}: {label} must be finite and >= 0, got {v}")
        if self.beta > 1.0:
            raise ValueError(f"species {self.name!r}: beta must lie in [0, 1], got {self.beta}")


@dataclass
class SnailParams:
    """Rate constants for the intermediate-host snail population."""

    alpha_s: float    # birth rate (1/day)
    mu_s: float       # natural death rate (1/day)
    kappa_s: float    # carrying capacity (snails per habitat area)
    gamma_s: float    # disease-induced death rate (1/day)
    beta_s: float     # infection probability (dimensionless)
    omega_s: float    # contact rate with eggs (1/day per egg)
    nu_s: float       # cercaria shedding rate (larvae/day per infected snail)

    def validate(self) -> None:
        for label in ("alpha_s", "mu_s", "kappa_s", "gamma_s", "beta_s", "omega_s", "nu_s"):
            v = getattr(self, label)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"snail parameter {label} must be finite and >= 0, got {v}")
        if self.kappa_s <= 0:
            raise ValueError(f"kappa_s must be > 0, got {self.kappa_s}")
        if self.beta_s > 1.0:
            raise ValueError(f"beta_s must lie in [0, 1], got {self.beta_s}")


@dataclass
class FreeStageParams:
    """Death rates of the free-living egg and cercaria pools."""

    mu_e: float       # egg death rate (1/day)
    mu_l: float       # cercaria death rate (1/day)

    def validate(self) -> None:
        # both appear as denominators in the reproduction number
        if not (np.isfinite(self.mu_e) and self.mu_e > 0):
            raise ValueError(f"mu_e must be finite and > 0, got {self.mu_e}")
        if not (np.isfinite(self.mu_l) and self.mu_l > 0):
            raise ValueError(f"mu_l must be finite and > 0, got {self.mu_l}")


@dataclass
class ModelParams:
    """Complete parameter set: snail block, free-stage block, ordered species."""

    snail: SnailParams
    free: FreeStageParams
    species: tuple[SpeciesParams, ...]

    def __post_init__(self) -> None:
        self.species = tuple(self.species)

    @property
    def m(self) -> int:
        return len(self.species)

    @property
    def dim(self) -> int:
        return 2 * self.m + 4

    def validate(self) -> None:
        if self.m < 1:
            raise ValueError("at least one mammal species is required")
        self.snail.validate()
        self.free.validate()
        for s in self.species:
            s.validate()

    def state_names(self) -> list[str]:
        names = ["E", "S_s", "S_i", "L"]
        for j in range(1, self.m + 1):
            names += [f"M_{j}_s", f"M_{j}_i"]
        return names

    def controlled_indices(self) -> list[int]:
        return [j for j, s in enumerate(self.species) if s.controlled]

    def species_arrays(self) -> dict[str, np.ndarray]:
        """Pack per-species rates into flat arrays (kernel-friendly layout)."""
        return {
            "alpha": np.array([s.alpha for s in self.species], dtype=float),
            "mu": np.array([s.mu for s in self.species], dtype=float),
            "theta": np.array([s.theta for s in self.species], dtype=float),
            "gamma": np.array([s.gamma for s in self.species], dtype=float),
            "beta": np.array([s.beta for s in self.species], dtype=float),
            "omega": np.array([s.omega for s in self.species], dtype=float),
        }


@dataclass(frozen=True)
class State:
    """One point of the compartment vector, as a named record.

    Numeric code operates on flat vectors; this record is the boundary
    representation used by configs and reports.
    """

    e: float
    s_s: float
    s_i: float
    l: float
    m_s: tuple[float, ...]
    m_i: tuple[float, ...]

    def to_vector(self) -> np.ndarray:
        m = len(self.m_s)
        x = np.empty(2 * m + 4)
        x[0], x[1], x[2], x[3] = self.e, self.s_s, self.s_i, self.l
        x[4::2] = self.m_s
        x[5::2] = self.m_i
        return x

    @staticmethod
    def from_vector(x: Sequence[float], m: int) -> "State":
        x = np.asarray(x, dtype=float)
        if x.size != 2 * m + 4:
            raise ValueError(f"state vector of length {x.size} does not match m={m}")
        return State(e=float(x[0]), s_s=float(x[1]), s_i=float(x[2]), l=float(x[3]),
                     m_s=tuple(float(v) for v in x[4::2]),
                     m_i=tuple(float(v) for v in x[5::2]))


@dataclass
class ControlValue:
    """One point of the control channels.

    u_m carries one treatment rate per species in declaration order; entries
    for uncontrolled species must be 0. u_k >= 1 divides the snail carrying
    capacity (u_k = 1 is neutral); the rate channels are neutral at 0.
    """

    u_a: float = 0.0
    u_s: float = 0.0
    u_k: float = 1.0
    u_m: tuple[float, ...] = ()

    def validate(self, params: ModelParams) -> None:
        if len(self.u_m) != params.m:
            raise ValueError(f"u_m has {len(self.u_m)} entries for {params.m} species")
        if self.u_k == 0.0:
            raise ValueError("u_k = 0 divides the carrying capacity by zero")
        for j, (uj, spc) in enumerate(zip(self.u_m, params.species)):
            if uj != 0.0 and not spc.controlled:
                raise ValueError(f"treatment rate set for uncontrolled species {spc.name!r} (index {j})")


def _check_finite(x: np.ndarray, params: ModelParams) -> None:
    if not np.all(np.isfinite(x)):
        names = params.state_names()
        bad = [names[i] for i in np.flatnonzero(~np.isfinite(x))]
        raise ValueError(f"non-finite state component(s): {', '.join(bad)}")


def _as_vector(state, params: ModelParams) -> np.ndarray:
    x = state.to_vector() if isinstance(state, State) else np.asarray(state, dtype=float)
    if x.size != params.dim:
        raise ValueError(f"state dimension {x.size} does not match 2m+4 = {params.dim}")
    return x


def rhs_controlled(state, params: ModelParams, u: ControlValue) -> np.ndarray:
    """Time derivative of the controlled system at one state point.

    Neutral controls (u_a = u_s = 0, u_k = 1, all u_m = 0) reproduce the
    uncontrolled system exactly.
    """
    x = _as_vector(state, params)
    _check_finite(x, params)
    u.validate(params)

    sn, fr = params.snail, params.free
    E, Ss, Si, L = x[0], x[1], x[2], x[3]
    Ms = x[4::2]
    Mi = x[5::2]
    sa = params.species_arrays()
    S = Ss + Si
    cap = sn.kappa_s / u.u_k
    um = np.asarray(u.u_m, dtype=float)

    dx = np.empty_like(x)
    dx[0] = float(sa["theta"] @ Mi) - sn.omega_s * Ss * E - fr.mu_e * E - u.u_a * E
    dx[1] = (-sn.omega_s * sn.beta_s * Ss * E
             + sn.alpha_s * S * (1.0 - S / cap) - sn.mu_s * Ss - u.u_s * Ss)
    dx[2] = sn.omega_s * sn.beta_s * Ss * E - (sn.mu_s + sn.gamma_s) * Si - u.u_s * Si
    dx[3] = sn.nu_s * Si - float(sa["omega"] @ Ms) * L - fr.mu_l * L - u.u_a * L
    infection = sa["omega"] * sa["beta"] * L * Ms
    dx[4::2] = -infection + sa["alpha"] - sa["mu"] * Ms
    dx[5::2] = infection - (sa["mu"] + sa["gamma"]) * Mi - um * Mi
    return dx


def rhs_uncontrolled(state, params: ModelParams) -> np.ndarray:
    """Time derivative of the uncontrolled system at one state point."""
    return rhs_controlled(state, params, ControlValue(u_m=(0.0,) * params.m))


@dataclass(frozen=True)
class DomainBounds:
    """Invariant-domain ceilings: per-pool caps and per-species totals.

    egg bounds E, snail bounds S_s + S_i, larva bounds L, and mammal[j] bounds
    M_j_s + M_j_i.
    """

    egg: float
    snail: float
    larva: float
    mammal: tuple[float, ...]


def domain_bounds(params: ModelParams, initial) -> DomainBounds:
    """Ceilings of the positively invariant domain for a given start.

    The snail ceiling is the logistic rest point kappa_s (alpha_s - mu_s) /
    alpha_s (or the initial total if larger): snail totals converge to that
    rest point, so any smaller ceiling would be left by trajectories
    approaching it. When alpha_s <= mu_s the snail population only decays and
    the ceiling is the initial total. The larva ceiling scales the snail
    ceiling by nu_s / mu_l, and the egg ceiling scales the mammal ceilings by
    theta_j / mu_e.
    """
    params.validate()
    x0 = _as_vector(initial, params)
    _check_finite(x0, params)
    sn, fr = params.snail, params.free

    for s in params.species:
        if s.mu <= 0:
            raise ValueError(f"mammal bound undefined: species {s.name!r} has mu = 0")

    mammal = tuple(max(s.alpha / s.mu, float(x0[4 + 2 * j] + x0[5 + 2 * j]))
                   for j, s in enumerate(params.species))
    if sn.alpha_s > sn.mu_s:
        rest = sn.kappa_s * (sn.alpha_s - sn.mu_s) / sn.alpha_s
        snail = max(rest, float(x0[1] + x0[2]))
    else:
        snail = max(0.0, float(x0[1] + x0[2]))
    egg_supply = sum(s.theta * mb for s, mb in zip(params.species, mammal))
    egg = max(egg_supply / fr.mu_e, float(x0[0]))
    larva = max(sn.nu_s * snail / fr.mu_l, float(x0[3]))
    return DomainBounds(egg=egg, snail=snail, larva=larva, mammal=mammal)


def check_in_domain(state, bounds: DomainBounds, rel_slack: float = 1e-9) -> bool:
    """True iff the state is componentwise nonnegative and inside the ceilings.

    rel_slack widens every comparison by a relative tolerance so that
    integrator round-off at the boundary does not read as a violation.
    """
    x = np.asarray(state, dtype=float)
    m = (x.size - 4) // 2
    slack = lambda b: b + rel_slack * (1.0 + abs(b))
    if np.any(x < -rel_slack * (1.0 + np.abs(x))):
        return False
    if x[0] > slack(bounds.egg):
        return False
    if x[1] + x[2] > slack(bounds.snail):
        return False
    if x[3] > slack(bounds.larva):
        return False
    for j in range(m):
        if x[4 + 2 * j] + x[5 + 2 * j] > slack(bounds.mammal[j]):
            return False
    return True


# ---------------------------------------------------------------------------
# packaged defaults and config serialization
# ---------------------------------------------------------------------------

def default_params() -> ModelParams:
    """The packaged baseline parameter set: two controlled species.

    Values are the shipped defaults for a lowland endemic setting (rates per
    day; snail density per square meter of habitat).
    """
    return ModelParams(
        snail=SnailParams(alpha_s=0.06886, mu_s=0.0035, kappa_s=17300.0,
                          gamma_s=0.016, beta_s=1e-4, omega_s=1.17617, nu_s=0.20865),
        free=FreeStageParams(mu_e=0.38527, mu_l=0.23407),
        species=(
            SpeciesParams(name="human", alpha=0.00278, mu=3.914e-5, theta=250.0,
                          gamma=0.00898, beta=0.01591, omega=0.19972, controlled=True),
            SpeciesParams(name="bovine", alpha=8.235e-8, mu=1.218e-7, theta=104750.0,
                          gamma=0.00486, beta=0.47124, omega=0.24692, controlled=True),
        ),
    )


def params_to_dict(params: ModelParams) -> dict:
    """Serialize to the key/value tree used by config files."""
    return {
        "snail": {k: getattr(params.snail, k)
                  for k in ("alpha_s", "mu_s", "kappa_s", "gamma_s", "beta_s", "omega_s", "nu_s")},
        "free_stages": {"mu_e": params.free.mu_e, "mu_l": params.free.mu_l},
        "species": [
            {"name": s.name, "alpha": s.alpha, "mu": s.mu, "theta": s.theta,
             "gamma": s.gamma, "beta": s.beta, "omega": s.omega, "controlled": s.controlled}
            for s in params.species
        ],
    }


def params_from_dict(tree: dict) -> ModelParams:
    """Parse and validate a parameter tree (inverse of params_to_dict)."""
    try:
        snail = SnailParams(**tree["snail"])
        free = FreeStageParams(**tree["free_stages"])
        species = tuple(SpeciesParams(**entry) for entry in tree["species"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed parameter tree: {exc}") from exc
    params = ModelParams(snail=snail, free=free, species=species)
    params.validate()
    return params
