"""Equilibria, linear stability, and the basic reproduction number.

Three steady states are exposed:

- ``dfe1``: every aquatic pool empty, mammals at demographic balance.
- ``dfe2``: snails at logistic carrying balance, no infection anywhere.
- ``endemic_equilibrium``: all pools positive, found by bracketed
  root-finding on the cercaria density and closed-form back-substitution.

``r0`` returns both the closed-form reproduction number (a sum of one
transmission-cycle gain per mammal species) and the spectral radius of the
next-generation matrix built from the transmission/transition splitting at
the snail-present infection-free state.  The closed form is the quantity
used as the threshold everywhere in this package; the spectral radius is
reported alongside it because the splitting also carries uptake-loss terms
whose magnitude is not normalized by the cycle gain.

Stability labels come from a dense eigensolve of a central finite-difference
Jacobian.  The classifier refuses states that are not steady to within
``1e-8 * (1 + max|x|)``, reusing the same residual gate the equilibrium
constructors must pass.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .model import ModelParams, State, rhs_uncontrolled

__all__ = [
    "EquilibriumError",
    "EquilibriumReport",
    "R0Report",
    "StabilityReport",
    "classify_stability",
    "dfe1",
    "dfe2",
    "endemic_equilibrium",
    "jacobian",
    "r0",
]

# steady-state residual gate, shared by constructors and the classifier
_RESIDUAL_REL = 1e-8
# eigenvalue dead band around zero for the stable/unstable/marginal split
_EIG_BAND = 1e-8


class EquilibriumError(RuntimeError):
    """A requested steady state does not exist for these parameters."""


@dataclass(frozen=True)
class StabilityReport:
    """Linearization summary at one steady state."""

    label: str
    max_real: float
    eigenvalues: np.ndarray


@dataclass(frozen=True)
class EquilibriumReport:
    """A steady state together with its residual and linear stability."""

    kind: str
    state: State
    residual: float
    stability: str
    max_real_eigenvalue: float
    eigenvalues: np.ndarray


@dataclass(frozen=True)
class R0Report:
    """Reproduction number, its per-species split, and the matrix route."""

    r0: float
    ngm_spectral_radius: float
    per_species_terms: tuple[float, ...]
    f_matrix: np.ndarray
    v_matrix: np.ndarray
    ngm: np.ndarray


def _residual_gate(x: np.ndarray) -> float:
    return _RESIDUAL_REL * (1.0 + float(np.max(np.abs(x))))


def _residual(params: ModelParams, x: np.ndarray) -> float:
    return float(np.max(np.abs(rhs_uncontrolled(x, params))))


def _require_snail_growth(params: ModelParams, what: str) -> None:
    sn = params.snail
    if not sn.alpha_s > sn.mu_s:
        raise ValueError(
            f"{what} requires snail births to outpace snail deaths "
            f"(alpha_s={sn.alpha_s:g} <= mu_s={sn.mu_s:g}); with a declining "
            "snail population only the snail-free state exists (see dfe1)")


def _snail_balance(params: ModelParams) -> float:
    sn = params.snail
    return sn.kappa_s * (sn.alpha_s - sn.mu_s) / sn.alpha_s


def _uptake_loss_ratios(params: ModelParams) -> tuple[float, float]:
    """Egg losses to snail uptake over egg decay, and cercaria losses to
    mammal uptake over cercaria decay, both at the infection-free state."""
    sn, fr = params.snail, params.free
    a = sn.omega_s * _snail_balance(params) / fr.mu_e
    d = sum(s.omega * s.alpha / s.mu for s in params.species) / fr.mu_l
    return a, d


def jacobian(params: ModelParams, state) -> np.ndarray:
    """Central finite-difference Jacobian of the uncontrolled field.

    Step per component: ``1e-6 * (1 + |x_i|)``.  The field is quadratic in
    the state, so central differences are exact up to roundoff.
    """
    x = state.to_vector() if isinstance(state, State) else np.asarray(state, dtype=float)
    n = x.size
    jac = np.empty((n, n))
    for i in range(n):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        jac[:, i] = (rhs_uncontrolled(xp, params) - rhs_uncontrolled(xm, params)) / (2.0 * h)
    return jac


def classify_stability(params: ModelParams, state) -> StabilityReport:
    """Label a steady state stable/unstable/marginal from its linearization.

    Raises ValueError when the supplied state is not steady to within the
    residual gate, so a mistyped state cannot be silently classified.
    """
    x = state.to_vector() if isinstance(state, State) else np.asarray(state, dtype=float)
    res = _residual(params, x)
    if res > _residual_gate(x):
        raise ValueError(
            f"state is not an equilibrium: residual {res:.3e} exceeds "
            f"{_residual_gate(x):.3e}")
    eig = np.linalg.eigvals(jacobian(params, x))
    max_real = float(np.max(eig.real))
    if max_real < -_EIG_BAND:
        label = "stable"
    elif max_real > _EIG_BAND:
        label = "unstable"
    else:
        label = "marginal"
    return StabilityReport(label=label, max_real=max_real, eigenvalues=eig)


def _report(params: ModelParams, kind: str, x: np.ndarray) -> EquilibriumReport:
    res = _residual(params, x)
    if res > _residual_gate(x):
        raise EquilibriumError(
            f"{kind} reconstruction is inconsistent: residual {res:.3e} "
            f"exceeds {_residual_gate(x):.3e}")
    stab = classify_stability(params, x)
    return EquilibriumReport(
        kind=kind,
        state=State.from_vector(x, params.m),
        residual=res,
        stability=stab.label,
        max_real_eigenvalue=stab.max_real,
        eigenvalues=stab.eigenvalues,
    )


def dfe1(params: ModelParams) -> EquilibriumReport:
    """Snail-free, infection-free state: mammals at recruitment/death balance."""
    params.validate()
    for s in params.species:
        if s.mu <= 0.0:
            raise ValueError(
                f"species {s.name!r} has mu=0: its population has no "
                "demographic balance, so the snail-free state is undefined")
    x = np.zeros(params.dim)
    x[4::2] = [s.alpha / s.mu for s in params.species]
    return _report(params, "DFE1", x)


def dfe2(params: ModelParams) -> EquilibriumReport:
    """Infection-free state with snails at logistic balance."""
    params.validate()
    for s in params.species:
        if s.mu <= 0.0:
            raise ValueError(
                f"species {s.name!r} has mu=0: no demographic balance exists")
    _require_snail_growth(params, "the snail-carrying infection-free state")
    x = np.zeros(params.dim)
    x[1] = _snail_balance(params)
    x[4::2] = [s.alpha / s.mu for s in params.species]
    return _report(params, "DFE2", x)


def _closed_form_terms(params: ModelParams) -> tuple[float, ...]:
    sn, fr = params.snail, params.free
    s_star = _snail_balance(params)
    snail_factor = (sn.omega_s * sn.beta_s * s_star / (sn.mu_s + sn.gamma_s)) \
        * (sn.nu_s / fr.mu_l)
    terms = []
    for s in params.species:
        mstar = s.alpha / s.mu
        terms.append((s.omega * s.beta * mstar / (s.mu + s.gamma))
                     * (s.theta / fr.mu_e) * snail_factor)
    return tuple(terms)


def _ngm_matrices(params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Transmission/transition splitting at the snail-present state.

    Infected coordinates, in order: egg pool, infected snails, cercaria
    pool, then one infected-mammal coordinate per species.
    """
    sn, fr = params.snail, params.free
    m = params.m
    s_star = _snail_balance(params)
    arr = params.species_arrays()
    mstar = arr["alpha"] / arr["mu"]
    f = np.zeros((m + 3, m + 3))
    f[0, 0] = -sn.omega_s * s_star
    f[0, 3:] = arr["theta"]
    f[1, 0] = sn.omega_s * sn.beta_s * s_star
    f[2, 1] = sn.nu_s
    f[2, 2] = -float(arr["omega"] @ mstar)
    f[3:, 2] = arr["omega"] * arr["beta"] * mstar
    v = np.diag(np.concatenate((
        [fr.mu_e, sn.mu_s + sn.gamma_s, fr.mu_l],
        arr["mu"] + arr["gamma"])))
    return f, v


def r0(params: ModelParams) -> R0Report:
    """Basic reproduction number at the snail-present infection-free state.

    The closed form multiplies, per mammal species, the expected egg output
    of one infected mammal, the snail infections per egg, and the mammal
    infections per infected snail, then sums over species.  The
    next-generation matrix route is computed alongside for reporting.
    """
    params.validate()
    for s in params.species:
        if s.mu <= 0.0:
            raise ValueError(f"species {s.name!r} has mu=0: no demographic balance exists")
    _require_snail_growth(params, "the reproduction number")
    terms = _closed_form_terms(params)
    f, v = _ngm_matrices(params)
    ngm = f @ np.linalg.inv(v)
    rho = float(np.max(np.abs(np.linalg.eigvals(ngm))))
    return R0Report(
        r0=float(sum(terms)),
        ngm_spectral_radius=rho,
        per_species_terms=terms,
        f_matrix=f,
        v_matrix=v,
        ngm=ngm,
    )


def _endemic_pieces(params: ModelParams, L):
    """Back-substitute every other pool from a cercaria density.

    Vectorized over ``L``.  Returns (E, S_s, S_i, M_s, M_i) with the mammal
    blocks shaped ``(m,) + shape(L)``.
    """
    sn, fr = params.snail, params.free
    arr = params.species_arrays()
    al = arr["alpha"][:, None]
    mu = arr["mu"][:, None]
    th = arr["theta"][:, None]
    ga = arr["gamma"][:, None]
    be = arr["beta"][:, None]
    om = arr["omega"][:, None]
    L = np.atleast_1d(np.asarray(L, dtype=float))[None, :]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        m_s = al / (om * be * L + mu)
        m_i = om * be * al * L / ((om * be * L + mu) * (mu + ga))
        q = np.sum(om * m_s, axis=0) + fr.mu_l
        p = np.sum(om * be * th * al / ((om * be * L + mu) * (mu + ga)), axis=0)
        den = sn.omega_s * sn.nu_s * sn.beta_s * p - sn.omega_s * (sn.mu_s + sn.gamma_s) * q
        s_s = q * (sn.mu_s + sn.gamma_s) * fr.mu_e / den
        e = p * L[0] / (sn.omega_s * s_s + fr.mu_e)
        s_i = q * L[0] / sn.nu_s
    return e, s_s, s_i, m_s, m_i


def _snail_logistic_gap(params: ModelParams, L):
    """Pole-free root function for the cercaria density scan.

    The raw condition is snail recruitment minus snail losses at the
    back-substituted pools, but the back-substituted susceptible-snail pool
    is a ratio A/den with a pole that can sit within machine distance of the
    equilibrium itself.  Multiplying the condition by den**2 clears the pole
    while keeping every equilibrium a zero, so sign changes can be bracketed
    on a coarse grid even when a pole lies inside the bracket.  Zeros that
    do not correspond to positive pools are discarded later by the
    positivity and residual gates.  The result is normalized by the term
    magnitudes, which preserves zeros and keeps extreme parameter draws
    inside floating-point range.
    """
    sn, fr = params.snail, params.free
    arr = params.species_arrays()
    al = arr["alpha"][:, None]
    mu = arr["mu"][:, None]
    th = arr["theta"][:, None]
    ga = arr["gamma"][:, None]
    be = arr["beta"][:, None]
    om = arr["omega"][:, None]
    L = np.atleast_1d(np.asarray(L, dtype=float))[None, :]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        turnover = om * be * L + mu
        q = np.sum(om * al / turnover, axis=0) + fr.mu_l
        p = np.sum(om * be * th * al / (turnover * (mu + ga)), axis=0)
        num = q * (sn.mu_s + sn.gamma_s) * fr.mu_e
        den = sn.omega_s * sn.nu_s * sn.beta_s * p \
            - sn.omega_s * (sn.mu_s + sn.gamma_s) * q
        s_i = q * L[0] / sn.nu_s
        t1 = sn.alpha_s * (num * den + s_i * den * den)
        t2 = sn.alpha_s * (num + s_i * den) ** 2 / sn.kappa_s
        t3 = sn.mu_s * num * den
        t4 = (sn.mu_s + sn.gamma_s) * s_i * den * den
        scale = np.abs(t1) + np.abs(t2) + np.abs(t3) + np.abs(t4)
        return (t1 - t2 - t3 - t4) / (1.0 + scale)


def _assemble_endemic(params: ModelParams, L: float) -> np.ndarray:
    e, s_s, s_i, m_s, m_i = _endemic_pieces(params, L)
    x = np.empty(params.dim)
    x[0], x[1], x[2], x[3] = e[0], s_s[0], s_i[0], L
    x[4::2] = m_s[:, 0]
    x[5::2] = m_i[:, 0]
    return x


def endemic_equilibrium(params: ModelParams) -> EquilibriumReport:
    """Fully positive steady state, when the reproduction number exceeds 1.

    The steady-state relations reduce every pool to a function of the
    cercaria density L.  The snail logistic balance then becomes a scalar
    equation on (0, nu_s * S_bal / mu_l], scanned geometrically for sign
    changes of a pole-free rescaling.  Roots whose reconstruction is not
    strictly positive, or whose residual exceeds the gate, are discarded;
    among the admissible roots the smallest-residual one is returned.
    """
    params.validate()
    _require_snail_growth(params, "an endemic state")
    rep = r0(params)
    if rep.r0 <= 1.0:
        raise EquilibriumError(
            f"no endemic equilibrium found: reproduction number {rep.r0:.6g} "
            "does not exceed 1")
    sn, fr = params.snail, params.free
    l_max = sn.nu_s * _snail_balance(params) / fr.mu_l
    grid = np.geomspace(l_max * 1e-20, l_max, 6000)
    gap = _snail_logistic_gap(params, grid)
    valid = np.isfinite(gap)
    best: tuple[float, np.ndarray] | None = None
    scalar_gap = lambda L: float(_snail_logistic_gap(params, L)[0])
    for i in range(grid.size - 1):
        if not (valid[i] and valid[i + 1]):
            continue
        if gap[i] == 0.0:
            root = float(grid[i])
        elif gap[i] * gap[i + 1] < 0.0:
            root = brentq(scalar_gap, float(grid[i]), float(grid[i + 1]),
                          xtol=1e-300, rtol=8.9e-16, maxiter=200)
        else:
            continue
        x = _assemble_endemic(params, float(root))
        if not np.all(np.isfinite(x)) or np.any(x <= 0.0):
            continue
        res = _residual(params, x)
        if res <= _residual_gate(x) and (best is None or res < best[0]):
            best = (res, x)
    if best is None:
        # the positive branch leaves the snail-carrying infection-free state
        # only once the reproduction number also exceeds the product of the
        # two uptake-loss factors (1 + omega_s S*/mu_e)(1 + sum omega_j M_j*
        # / mu_l); between 1 and that product no positive steady state exists
        a, d = _uptake_loss_ratios(params)
        raise EquilibriumError(
            "no endemic equilibrium found: the scan over cercaria densities "
            f"produced no admissible sign change (r0={rep.r0:.6g} vs "
            f"uptake-loss factor (1+a)(1+d)={(1.0 + a) * (1.0 + d):.6g}; the "
            "infection-free snail state remains attracting below that factor)")
    return _report(params, "EE", best[1])
