"""Acceptance checklist: one test per shipped-behavior criterion.

Each test states a property of the package as a whole (domain invariance,
threshold agreement, stability classification, adjoint correctness, preset
orderings, sweep monotonicity, calibration recovery, integrator order, and
manifest reproducibility) together with a wall-clock budget, and asserts
both. Run with ``pytest -v tests/test_acceptance.py`` to get one pass/fail
line per criterion. Draw laws and oracles are shared with the unit-test
modules so the properties checked here are the same ones proved there at
smoke scale.
"""

import time

import numpy as np
import pytest

from drawlaws import (
    draw_base,
    draw_regime_endemic,
    draw_regime_snail_decline,
    draw_regime_subthreshold,
    draw_subcritical,
    draw_supercritical,
)
from test_calibrate import (
    sample_times,
    seeded_initial,
    small_habitat_params,
    truth_params,
)
from test_control import (
    ctrl_family,
    grad_u_oracle,
    grad_x_oracle,
    mild_weights,
    u_dict,
    wide_bounds,
)
from test_equilibria import oracle_endemic_state
from test_model import oracle_rhs

from schistoctl.calibrate import (
    abc_rejection,
    default_priors,
    refine_fit,
    synth_data,
)
from schistoctl.control import ControlValue, adjoint_rhs, characterize_controls
from schistoctl.equilibria import dfe1, dfe2, endemic_equilibrium, r0
from schistoctl.integrate import TimeGrid
from schistoctl.model import State, check_in_domain, domain_bounds
from schistoctl.scenarios import SweepSpec, load_preset, replay_manifest, run_scenario, run_sweep
from schistoctl.simulate import simulate_model


def _within(budget_s: float, t0: float) -> None:
    elapsed = time.perf_counter() - t0
    assert elapsed < budget_s, \
        f"budget {budget_s:.0f}s exceeded: took {elapsed:.1f}s"


def random_start_in_domain(rng, params):
    """A state drawn inside the invariant region's ceilings."""
    caps = domain_bounds(params, np.zeros(params.dim))
    x0 = np.zeros(params.dim)
    x0[0] = rng.uniform(0.0, caps.egg)
    total, f = rng.uniform(0.0, caps.snail), rng.uniform()
    x0[1], x0[2] = (1.0 - f) * total, f * total
    x0[3] = rng.uniform(0.0, caps.larva)
    for j in range(params.m):
        total, f = rng.uniform(0.0, caps.mammal[j]), rng.uniform()
        x0[4 + 2 * j], x0[5 + 2 * j] = (1.0 - f) * total, f * total
    return x0


def test_criterion_01_invariant_domain():
    # 200 random parameter draws x random starts inside the region,
    # T = 500 days at dt = 0.1: every grid point stays inside. < 2 min.
    t0 = time.perf_counter()
    rng = np.random.default_rng(12345)
    grid = TimeGrid(0.0, 500.0, 0.1)
    for i in range(200):
        params = draw_base(rng, snail_growth=bool(i % 2))
        x0 = random_start_in_domain(rng, params)
        traj = simulate_model(params, x0, grid)
        bounds = domain_bounds(params, x0)
        for k in range(grid.n + 1):
            assert check_in_domain(traj.values[k], bounds), \
                f"draw {i} left the region at t={grid.points()[k]:.1f}"
    _within(120.0, t0)


def test_criterion_02_threshold_sign_agreement():
    # 100 random draws with growing snails: the closed form and the
    # next-generation spectral radius sit on the same side of 1, with a
    # 1e-10 indifference band at the threshold. < 10 s.
    t0 = time.perf_counter()
    rng = np.random.default_rng(777)
    draws = [draw_supercritical(rng) for _ in range(50)]
    draws += [draw_subcritical(rng) for _ in range(50)]
    for params in draws:
        rep = r0(params)
        closed, spectral = rep.r0 - 1.0, rep.ngm_spectral_radius - 1.0
        if abs(closed) < 1e-10 or abs(spectral) < 1e-10:
            continue
        assert np.sign(closed) == np.sign(spectral), \
            f"r0={rep.r0:.6g} vs spectral radius={rep.ngm_spectral_radius:.6g}"
    _within(10.0, t0)


def oracle_max_real_eigenvalue(params, x):
    """Largest Jacobian eigenvalue real part, built entirely from the
    term-by-term field oracle (no shared code with the library path)."""
    n = x.size
    jac = np.empty((n, n))
    for i in range(n):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        jac[:, i] = (oracle_rhs(xp, params) - oracle_rhs(xm, params)) / (2 * h)
    return float(np.max(np.linalg.eigvals(jac).real))


def draw_regime_endemic_stable(rng):
    """An above-threshold draw whose endemic state is spectrally stable.

    draw_regime_endemic guarantees the infected block destabilizes the
    infection-free snail state, but the endemic state itself can shed a
    slow unstable spiral at high loop gain with slow snail demography, so
    stability does not hold on all of that law's support. Redraw until an
    independent check (bisection equilibrium plus oracle-field Jacobian)
    shows clear stability; the classifier is then tested only where the
    expected answer is known. A classifier biased toward either label
    still fails: it must answer 'unstable' at the snail-free state and
    'stable' at the endemic one for the same draw.
    """
    for _ in range(200):
        params = draw_regime_endemic(rng)
        try:
            x = oracle_endemic_state(params)
        except AssertionError:
            continue
        if oracle_max_real_eigenvalue(params, x) < -1e-6:
            return params
    raise AssertionError("no spectrally stable endemic draw found")


def test_criterion_03_stability_classification():
    # 30 draws per regime: declining snails -> DFE1 stable; subthreshold
    # -> DFE2 stable; above threshold (stable-spectrum draws) -> DFE2
    # unstable and the endemic state stable with residual <= 1e-8
    # relative. < 1 min.
    t0 = time.perf_counter()
    rng = np.random.default_rng(4242)
    for _ in range(30):
        assert dfe1(draw_regime_snail_decline(rng)).stability == "stable"
    for _ in range(30):
        assert dfe2(draw_regime_subthreshold(rng)).stability == "stable"
    for _ in range(30):
        params = draw_regime_endemic_stable(rng)
        assert dfe2(params).stability == "unstable"
        ee = endemic_equilibrium(params)
        assert ee.stability == "stable"
        scale = 1.0 + np.max(np.abs(ee.state.to_vector()))
        assert ee.residual <= 1e-8 * scale
    _within(60.0, t0)


def test_criterion_04_adjoint_and_stationarity():
    # 1000 random (state, costate, control) points: the adjoint field
    # matches -grad_x H by central differences within 1e-6 relative, and
    # characterized interior controls zero dH/du within 1e-10. < 30 s.
    t0 = time.perf_counter()
    params = ctrl_family()
    weights = mild_weights()
    bounds = wide_bounds()
    rng = np.random.default_rng(99)
    interior_checked = 0
    for _ in range(1000):
        x = rng.uniform(0.1, 60.0, size=8)
        lam = rng.uniform(-2.0, 2.0, size=8)
        cv = ControlValue(u_a=rng.uniform(0, 0.3), u_s=rng.uniform(0, 0.3),
                          u_k=rng.uniform(1.0, 2.0),
                          u_m=(rng.uniform(0, 0.3), rng.uniform(0, 0.3)))
        got = adjoint_rhs(lam, x, cv, params)
        want = -grad_x_oracle(x, lam, u_dict(cv), params, weights)
        np.testing.assert_allclose(
            got, want, rtol=1e-6, atol=1e-6 * (1.0 + np.max(np.abs(want))))

        lam_small = rng.uniform(-0.02, 0.02, size=8)
        star = characterize_controls(State.from_vector(x, 2), lam_small,
                                     params, weights, bounds)
        u = u_dict(star)
        if 0.0 < star.u_a < bounds.u_a_max:
            assert abs(grad_u_oracle(x, lam_small, u, params, weights,
                                     "u_a")) <= 1e-10
            interior_checked += 1
        if 0.0 < star.u_s < bounds.u_s_max:
            assert abs(grad_u_oracle(x, lam_small, u, params, weights,
                                     "u_s")) <= 1e-10
            interior_checked += 1
        if 1.0 < star.u_k < bounds.u_k_max:
            assert abs(grad_u_oracle(x, lam_small, u, params, weights,
                                     "u_k")) <= 1e-10
            interior_checked += 1
        for j in range(2):
            if 0.0 < star.u_m[j] < bounds.u_m_max[j]:
                assert abs(grad_u_oracle(x, lam_small, u, params, weights,
                                         "u_m", j)) <= 1e-10
                interior_checked += 1
    assert interior_checked >= 500
    _within(30.0, t0)


@pytest.fixture(scope="module")
def preset_runs(tmp_path_factory):
    """All four non-rodent presets run once, with per-run wall times."""
    out = tmp_path_factory.mktemp("presets")
    runs, elapsed = {}, {}
    for name in ("treatment-only", "aquatic-only", "mechanical-only",
                 "integrated"):
        t0 = time.perf_counter()
        runs[name] = run_scenario(load_preset(name), out / name)
        elapsed[name] = time.perf_counter() - t0
        assert runs[name].summary["converged"], f"{name} did not converge"
    return runs, elapsed


def infected_series(bundle, species):
    names = [s.name for s in bundle.params.species]
    return bundle.result.state.values[:, 5 + 2 * names.index(species)]


def test_criterion_05_preset_ordering(preset_runs):
    # Chemotherapy reaches a 90% reduction of infected humans and bovines
    # strictly sooner than the aquatic and mechanical programs and stays
    # strictly below both at every grid point after day 30; the combined
    # program ends with the lowest total infections. < 5 min.
    runs, elapsed = preset_runs
    t0 = time.perf_counter()

    def d90(name, species):
        v = runs[name].summary["species"][species]["days_to_90pct_reduction"]
        return np.inf if v is None else v

    for species in ("human", "bovine"):
        for other in ("aquatic-only", "mechanical-only"):
            assert d90("treatment-only", species) < d90(other, species)
            times = runs["treatment-only"].config.grid.points()
            after = times > 30.0
            treated = infected_series(runs["treatment-only"], species)
            alt = infected_series(runs[other], species)
            assert np.all(treated[after] < alt[after]), \
                f"{species}: treatment-only not below {other} past day 30"

    finals = {n: runs[n].summary["final_total_infected"] for n in runs}
    assert finals["integrated"] == min(finals.values())
    _within(300.0 - sum(elapsed.values()), t0)


def test_criterion_06_compliance_sweep(tmp_path):
    # Compliance 0.1..1.0 scaling the treatment bounds of the shipped
    # combined preset: the human channel's active days are nonincreasing
    # in compliance and fall below day 200 from compliance 0.8 up, while
    # the bovine channel stays active at least 200 days throughout. < 10 min.
    t0 = time.perf_counter()
    values = tuple(round(0.1 * k, 1) for k in range(1, 11))
    spec = SweepSpec(kind="compliance", values=values,
                     base=load_preset("integrated"), channel="treatment")
    bundle = run_sweep(spec, tmp_path, workers=2)
    assert not bundle.any_errors
    assert all(r["converged"] for r in bundle.rows)

    human = [r["channels"]["treatment_human"] for r in bundle.rows]
    bovine = [r["channels"]["treatment_bovine"] for r in bundle.rows]
    days = [h["days_active"] for h in human]
    for lower, higher in zip(days, days[1:]):
        assert higher <= lower + 1e-9, \
            f"human active days increased with compliance: {days}"
    for value, h in zip(values, human):
        if value >= 0.8:
            assert h["days_active"] < 200.0, \
                f"human channel still active {h['days_active']}d at {value}"
            assert h["last_active_day"] < 200.0
    for value, b in zip(values, bovine):
        assert b["days_active"] >= 200.0, \
            f"bovine channel only {b['days_active']}d active at {value}"
    _within(600.0, t0)


def test_criterion_07_rodent_reservoir_response(tmp_path):
    # A growing untreatable rodent reservoir forces more bovine treatment:
    # the time-averaged bovine control level is strictly increasing across
    # starting prevalences 0, 0.2, 0.4, 0.6. < 5 min.
    t0 = time.perf_counter()
    spec = SweepSpec(kind="rodent_prevalence", values=(0.0, 0.2, 0.4, 0.6),
                     base=load_preset("rodents"))
    bundle = run_sweep(spec, tmp_path, workers=2)
    assert not bundle.any_errors
    assert all(r["converged"] for r in bundle.rows)
    averages = [r["channels"]["treatment_bovine"]["time_average"]
                for r in bundle.rows]
    for lower, higher in zip(averages, averages[1:]):
        assert higher > lower, \
            f"bovine control average not strictly increasing: {averages}"
    _within(300.0, t0)


def test_criterion_08_calibration_recovery():
    # Rejection ABC on noiseless synthetic prevalence (2000 draws, 1%
    # acceptance, fixed seed) brackets all ten fitted parameters in their
    # 95% intervals; refinement from a 10% perturbation cuts the distance
    # by at least 90%. < 10 min.
    t0 = time.perf_counter()
    base = small_habitat_params()
    truth, vec = truth_params()
    x0 = seeded_initial(base)
    observed = synth_data(truth, x0, sample_times(), 0.0, seed=0)
    prior = default_priors(base)
    assert prior.contains(vec)

    post = abc_rejection(prior, observed, base, n_draws=2000,
                         accept_fraction=0.01, seed=2024, initial=x0)
    lo, hi = post.interval(0.95)
    for name, low, true, high in zip(post.names, lo, vec, hi):
        assert low <= true <= high, \
            f"{name}: true {true:.6g} outside [{low:.6g}, {high:.6g}]"

    refined = refine_fit(vec * 1.10, observed, base, prior=prior, initial=x0)
    assert refined.start_distance > 0.0
    assert refined.distance <= 0.1 * refined.start_distance
    _within(600.0, t0)


def test_criterion_09_integrator_order():
    # RK4 endpoint error on the full model drops by 12x-20x when dt is
    # halved (theoretical factor 16). < 10 s.
    t0 = time.perf_counter()
    params = ctrl_family()
    x0 = np.array([1.0, 40.0, 2.0, 3.0, 25.0, 1.5, 6.0, 0.5])
    horizon = 4.0
    truth = simulate_model(params, x0, TimeGrid(0.0, horizon, 0.1 / 64),
                           substeps=1).values[-1]
    errors = []
    for dt in (0.2, 0.1):
        end = simulate_model(params, x0, TimeGrid(0.0, horizon, dt),
                             substeps=1).values[-1]
        errors.append(np.max(np.abs(end - truth)))
    ratio = errors[0] / errors[1]
    assert 12.0 <= ratio <= 20.0, f"error ratio {ratio:.2f}"
    _within(10.0, t0)


def test_criterion_10_manifest_replay(preset_runs, tmp_path):
    # Re-running the combined preset from its recorded manifest reproduces
    # every CSV byte for byte. < 1 min.
    runs, elapsed = preset_runs
    t0 = time.perf_counter()
    first = runs["integrated"]
    again = replay_manifest(first.out_dir / "manifest.yaml", tmp_path)
    for name in ("state.csv", "controls.csv", "adjoint.csv"):
        assert (tmp_path / name).read_bytes() == \
            (first.out_dir / name).read_bytes(), f"{name} differs on replay"
    assert again.summary["objective"] == first.summary["objective"]
    _within(60.0 - elapsed["integrated"], t0)
