"""Tests for prevalence simulation, ABC rejection fitting, and refinement.

The recovery tests run on a scaled-down habitat (kappa_s = 173) so that a
single 60-day simulation costs milliseconds; the fitted-parameter layout and
the dynamics are unchanged by that scaling.
"""

import numpy as np
import pytest

from schistoctl.calibrate import (
    FITTED_PARAMETER_NAMES,
    CalibrationError,
    PosteriorSample,
    PrevalenceSeries,
    PriorSpec,
    abc_rejection,
    apply_fitted,
    default_priors,
    distance,
    extract_fitted,
    load_prevalence_csv,
    refine_fit,
    save_prevalence_csv,
    simulate_prevalence,
    synth_data,
)
from schistoctl.equilibria import dfe2, endemic_equilibrium
from schistoctl.model import State, default_params


def small_habitat_params():
    p = default_params()
    p.snail.kappa_s = 173.0
    return p


# truth used by the recovery tests: a point inside the default prior box
# that is not the box midpoint
TRUTH_FACTORS = np.array([1.2, 0.8, 1.1, 0.9, 0.75, 1.15, 1.1, 0.9, 1.2, 0.85])


def truth_params():
    base = small_habitat_params()
    vec = extract_fitted(base) * TRUTH_FACTORS
    return apply_fitted(base, vec), vec


def seeded_initial(p, frac=0.1):
    # infection-free snail equilibrium with a fraction of each mammal pool
    # moved into the infected compartment
    base = dfe2(p).state
    m_s = tuple((1.0 - frac) * v for v in base.m_s)
    m_i = tuple(frac * v for v in base.m_s)
    return State(e=0.0, s_s=base.s_s, s_i=base.s_i, l=0.0, m_s=m_s, m_i=m_i)


def sample_times():
    return np.arange(0.0, 61.0, 3.0)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

def test_prevalence_series_validation():
    t = np.array([0.0, 1.0, 2.0])
    good = PrevalenceSeries(times=t, human_prevalence=[0.1, 0.2, 0.3],
                            bovine_prevalence=[0.0, 0.5, 1.0])
    assert good.times.shape == (3,)
    with pytest.raises(ValueError):
        PrevalenceSeries(times=t, human_prevalence=[0.1, 0.2],
                         bovine_prevalence=[0.0, 0.5, 1.0])
    with pytest.raises(ValueError):
        PrevalenceSeries(times=np.array([0.0, 2.0, 2.0]),
                         human_prevalence=[0.1, 0.2, 0.3],
                         bovine_prevalence=[0.0, 0.5, 1.0])
    with pytest.raises(ValueError):
        PrevalenceSeries(times=t, human_prevalence=[0.1, 0.2, 1.2],
                         bovine_prevalence=[0.0, 0.5, 1.0])
    with pytest.raises(ValueError):
        PrevalenceSeries(times=t, human_prevalence=[0.1, 0.2, 0.3],
                         bovine_prevalence=[-0.01, 0.5, 1.0])


def test_default_priors_layout():
    p = small_habitat_params()
    prior = default_priors(p)
    assert prior.names == FITTED_PARAMETER_NAMES
    vec = extract_fitted(p)
    assert np.all(prior.lower == 0.0)
    # four times the packaged value, capped at 1 for the probability entries
    hum, bov = p.species
    expect = np.minimum(4.0 * vec,
                        [np.inf, 1.0, np.inf, np.inf, 1.0, np.inf,
                         np.inf, np.inf, np.inf, np.inf])
    np.testing.assert_allclose(prior.upper, expect, rtol=0)
    assert prior.upper[1] == 4.0 * hum.beta  # under the cap
    assert prior.upper[4] == 1.0             # 4 * bovine beta exceeds 1
    assert prior.contains(vec)


def test_prior_spec_validation():
    p = small_habitat_params()
    prior = default_priors(p)
    with pytest.raises(ValueError):
        PriorSpec(names=prior.names[:9], lower=prior.lower[:9],
                  upper=prior.upper[:9])
    bad_names = ("x",) + prior.names[1:]
    with pytest.raises(ValueError):
        PriorSpec(names=bad_names, lower=prior.lower, upper=prior.upper)
    bad_upper = prior.upper.copy()
    bad_upper[3] = 0.0
    with pytest.raises(ValueError):
        PriorSpec(names=prior.names, lower=prior.lower, upper=bad_upper)


def test_apply_extract_roundtrip():
    base = small_habitat_params()
    rng = np.random.default_rng(3)
    vec = rng.uniform(0.01, 0.9, 10)
    trial = apply_fitted(base, vec)
    np.testing.assert_array_equal(extract_fitted(trial), vec)
    # the base object is untouched
    np.testing.assert_array_equal(extract_fitted(base),
                                  extract_fitted(small_habitat_params()))
    # non-fitted entries carried over
    assert trial.species[0].theta == base.species[0].theta
    assert trial.snail.kappa_s == base.snail.kappa_s
    with pytest.raises(ValueError):
        apply_fitted(base, vec[:9])


# ---------------------------------------------------------------------------
# simulate_prevalence
# ---------------------------------------------------------------------------

def test_prevalence_zero_infection():
    p = small_habitat_params()
    series = simulate_prevalence(p, dfe2(p).state, sample_times())
    np.testing.assert_array_equal(series.times, sample_times())
    assert np.all(series.human_prevalence == 0.0)
    assert np.all(series.bovine_prevalence == 0.0)


def test_prevalence_zero_denominator():
    # empty a mammal pool entirely: recruitment off, nothing to infect
    p = small_habitat_params()
    p.species[1].alpha = 0.0
    base = dfe2(p).state
    x0 = State(e=0.0, s_s=base.s_s, s_i=0.0, l=0.0,
               m_s=(base.m_s[0], 0.0), m_i=(0.0, 0.0))
    series = simulate_prevalence(p, x0, sample_times())
    assert np.all(series.bovine_prevalence == 0.0)


def test_prevalence_half_at_start():
    p = small_habitat_params()
    series = simulate_prevalence(p, seeded_initial(p, frac=0.5),
                                 np.array([0.0, 3.0]))
    assert series.human_prevalence[0] == pytest.approx(0.5, rel=1e-12)
    assert series.bovine_prevalence[0] == pytest.approx(0.5, rel=1e-12)


def test_prevalence_at_endemic_equilibrium():
    p = small_habitat_params()
    rep = endemic_equilibrium(p)
    st = rep.state
    series = simulate_prevalence(p, st, np.linspace(0.0, 30.0, 7))
    for j, col in enumerate((series.human_prevalence,
                             series.bovine_prevalence)):
        want = st.m_i[j] / (st.m_s[j] + st.m_i[j])
        np.testing.assert_allclose(col, want, rtol=1e-6)


def test_prevalence_requires_two_species():
    p = small_habitat_params()
    p.species = p.species[:1]
    with pytest.raises(ValueError, match="two"):
        simulate_prevalence(p, dfe2(p).state, sample_times())


# ---------------------------------------------------------------------------
# distance
# ---------------------------------------------------------------------------

def _random_series(rng, n=15):
    t = np.sort(rng.uniform(0.0, 50.0, n))
    while np.any(np.diff(t) <= 0):
        t = np.sort(rng.uniform(0.0, 50.0, n))
    return PrevalenceSeries(times=t, human_prevalence=rng.uniform(0, 1, n),
                            bovine_prevalence=rng.uniform(0, 1, n))


def test_distance_identity():
    s = _random_series(np.random.default_rng(5))
    assert distance(s, s) == 0.0


def test_distance_constant_offset():
    rng = np.random.default_rng(6)
    n = 12
    t = np.arange(float(n))
    h = rng.uniform(0.1, 0.8, n)
    b = rng.uniform(0.1, 0.8, n)
    a = PrevalenceSeries(times=t, human_prevalence=h, bovine_prevalence=b)
    off = PrevalenceSeries(times=t, human_prevalence=h + 0.1,
                           bovine_prevalence=b + 0.1)
    assert distance(a, off) == pytest.approx(0.1, rel=1e-12)


def test_distance_matches_rmse_oracle():
    rng = np.random.default_rng(7)
    a = _random_series(rng)
    b = PrevalenceSeries(times=a.times,
                         human_prevalence=rng.uniform(0, 1, a.times.size),
                         bovine_prevalence=rng.uniform(0, 1, a.times.size))
    resid = np.concatenate([a.human_prevalence - b.human_prevalence,
                            a.bovine_prevalence - b.bovine_prevalence])
    want = float(np.sqrt(np.mean(resid ** 2)))
    assert distance(a, b) == pytest.approx(want, abs=1e-14)


def test_distance_grid_mismatch():
    rng = np.random.default_rng(8)
    a = _random_series(rng)
    b = PrevalenceSeries(times=a.times + 0.5,
                         human_prevalence=a.human_prevalence,
                         bovine_prevalence=a.bovine_prevalence)
    with pytest.raises(ValueError, match="grid"):
        distance(a, b)


# ---------------------------------------------------------------------------
# synth_data
# ---------------------------------------------------------------------------

def test_synth_noiseless_identity():
    p = small_habitat_params()
    x0 = seeded_initial(p)
    t = sample_times()
    clean = simulate_prevalence(p, x0, t)
    synth = synth_data(p, x0, t, 0.0, seed=42)
    np.testing.assert_array_equal(synth.human_prevalence, clean.human_prevalence)
    np.testing.assert_array_equal(synth.bovine_prevalence, clean.bovine_prevalence)


def test_synth_determinism_and_seed_sensitivity():
    p = small_habitat_params()
    x0 = seeded_initial(p)
    t = sample_times()
    a = synth_data(p, x0, t, 0.02, seed=1)
    b = synth_data(p, x0, t, 0.02, seed=1)
    c = synth_data(p, x0, t, 0.02, seed=2)
    np.testing.assert_array_equal(a.human_prevalence, b.human_prevalence)
    np.testing.assert_array_equal(a.bovine_prevalence, b.bovine_prevalence)
    assert not np.array_equal(a.human_prevalence, c.human_prevalence)


def test_synth_noise_scale():
    # mid-range prevalence so the [0,1] clip almost never engages
    p = small_habitat_params()
    x0 = seeded_initial(p, frac=0.4)
    t = np.linspace(0.0, 60.0, 100)
    clean = simulate_prevalence(p, x0, t)
    noisy = synth_data(p, x0, t, 0.02, seed=33)
    resid = np.concatenate([noisy.human_prevalence - clean.human_prevalence,
                            noisy.bovine_prevalence - clean.bovine_prevalence])
    assert 0.015 <= float(np.std(resid)) <= 0.025


def test_synth_rejects_negative_noise():
    p = small_habitat_params()
    with pytest.raises(ValueError):
        synth_data(p, seeded_initial(p), sample_times(), -0.01, seed=1)


# ---------------------------------------------------------------------------
# abc_rejection
# ---------------------------------------------------------------------------

def test_abc_preconditions():
    p = small_habitat_params()
    prior = default_priors(p)
    x0 = seeded_initial(p)
    obs = synth_data(p, x0, sample_times(), 0.02, seed=9)
    with pytest.raises(ValueError):
        abc_rejection(prior, obs, p, n_draws=50, accept_fraction=0.1,
                      seed=1, initial=x0)
    for frac in (0.0, 0.6, -0.1):
        with pytest.raises(ValueError):
            abc_rejection(prior, obs, p, n_draws=100, accept_fraction=frac,
                          seed=1, initial=x0)


def test_abc_determinism():
    p = small_habitat_params()
    prior = default_priors(p)
    x0 = seeded_initial(p)
    obs = synth_data(p, x0, sample_times(), 0.02, seed=10)
    a = abc_rejection(prior, obs, p, n_draws=100, accept_fraction=0.1,
                      seed=77, initial=x0)
    b = abc_rejection(prior, obs, p, n_draws=100, accept_fraction=0.1,
                      seed=77, initial=x0)
    np.testing.assert_array_equal(a.accepted, b.accepted)
    np.testing.assert_array_equal(a.distances, b.distances)
    assert a.threshold == b.threshold
    assert a.n_failed == b.n_failed


def test_abc_sample_invariants():
    p = small_habitat_params()
    prior = default_priors(p)
    x0 = seeded_initial(p)
    obs = synth_data(p, x0, sample_times(), 0.02, seed=11)
    post = abc_rejection(prior, obs, p, n_draws=120, accept_fraction=0.25,
                         seed=3, initial=x0)
    assert post.accepted.shape == (30, 10)
    assert np.all(post.distances <= post.threshold)
    assert np.all(np.isfinite(post.mean()))
    assert np.all(post.variance() >= 0.0)
    lo, hi = post.interval(0.95)
    want_lo = np.percentile(post.accepted, 2.5, axis=0)
    want_hi = np.percentile(post.accepted, 97.5, axis=0)
    np.testing.assert_allclose(lo, want_lo, rtol=1e-12)
    np.testing.assert_allclose(hi, want_hi, rtol=1e-12)
    # the type itself enforces the threshold invariant
    with pytest.raises(ValueError):
        PosteriorSample(names=post.names, accepted=post.accepted,
                        distances=post.distances,
                        threshold=float(post.distances.max()) / 2.0,
                        n_draws=120, n_failed=0)


def test_abc_failed_draws_are_counted():
    p = small_habitat_params()
    base = default_priors(p)
    lower = base.lower.copy()
    upper = base.upper.copy()
    lower[9] = -1.0   # mu_l draws below 0 cannot be simulated
    upper[9] = 1.0
    prior = PriorSpec(names=base.names, lower=lower, upper=upper)
    x0 = seeded_initial(p)
    obs = synth_data(p, x0, sample_times(), 0.02, seed=12)
    post = abc_rejection(prior, obs, p, n_draws=100, accept_fraction=0.05,
                         seed=5, initial=x0)
    assert post.n_failed > 20
    assert post.n_draws == 100
    assert post.accepted.shape[0] == 5
    assert np.all(post.accepted[:, 9] > 0.0)


def test_abc_recovers_synthetic_truth():
    # smoke-scale version of the full recovery run in the acceptance suite
    base = small_habitat_params()
    truth, vec = truth_params()
    x0 = seeded_initial(base)
    obs = synth_data(truth, x0, sample_times(), 0.0, seed=0)
    prior = default_priors(base)
    assert prior.contains(vec)
    post = abc_rejection(prior, obs, base, n_draws=400, accept_fraction=0.05,
                         seed=2024, initial=x0)
    lo, hi = post.interval(0.95)
    assert np.all(lo <= vec) and np.all(vec <= hi)


def test_abc_uninformative_likelihood_returns_prior():
    # zero infection everywhere: every draw simulates the same all-zero
    # prevalence, so the distance to an all-one target is flat and the
    # accepted half is a plain uniform sample from the prior
    p = small_habitat_params()
    prior = default_priors(p)
    x0 = dfe2(p).state
    t = sample_times()
    ones = np.ones(t.size)
    obs = PrevalenceSeries(times=t, human_prevalence=ones,
                           bovine_prevalence=ones)
    post = abc_rejection(prior, obs, p, n_draws=2000, accept_fraction=0.5,
                         seed=6, initial=x0)
    assert post.n_failed == 0
    assert np.all(post.distances == 1.0)
    mid = (prior.lower + prior.upper) / 2.0
    np.testing.assert_allclose(post.mean(), mid, rtol=0.05)


# ---------------------------------------------------------------------------
# refine_fit
# ---------------------------------------------------------------------------

def test_refine_at_truth_stays_put():
    base = small_habitat_params()
    truth, vec = truth_params()
    x0 = seeded_initial(base)
    obs = synth_data(truth, x0, sample_times(), 0.0, seed=0)
    prior = default_priors(base)
    res = refine_fit(vec, obs, base, prior=prior, initial=x0,
                     max_evaluations=200)
    assert res.distance <= res.start_distance + 1e-9
    assert res.start_distance < 1e-10


def test_refine_reduces_distance_from_perturbation():
    base = small_habitat_params()
    truth, vec = truth_params()
    x0 = seeded_initial(base)
    obs = synth_data(truth, x0, sample_times(), 0.0, seed=0)
    prior = default_priors(base)
    start = vec * 1.10
    assert prior.contains(start)
    res = refine_fit(start, obs, base, prior=prior, initial=x0)
    assert res.start_distance > 0.0
    assert res.distance < 0.1 * res.start_distance
    assert res.improved


def test_refine_respects_box():
    base = small_habitat_params()
    truth, vec = truth_params()
    x0 = seeded_initial(base)
    obs = synth_data(truth, x0, sample_times(), 0.0, seed=0)
    prior = default_priors(base)
    start = vec.copy()
    start[7] = prior.upper[7]   # nu_s pinned at the box edge
    res = refine_fit(start, obs, base, prior=prior, initial=x0,
                     max_evaluations=600)
    assert np.all(res.parameters >= prior.lower)
    assert np.all(res.parameters <= prior.upper)
    assert res.distance <= res.start_distance


def test_refine_rejects_start_outside_box():
    base = small_habitat_params()
    prior = default_priors(base)
    x0 = seeded_initial(base)
    obs = synth_data(base, x0, sample_times(), 0.0, seed=0)
    start = prior.upper * 1.01
    with pytest.raises(ValueError, match="box"):
        refine_fit(start, obs, base, prior=prior, initial=x0)


# ---------------------------------------------------------------------------
# statistical properties
# ---------------------------------------------------------------------------

def test_abc_coverage_over_replications():
    # each replication draws its own truth from the middle of the prior box,
    # fits noisy data, and checks the 95% interval; most must cover
    base = small_habitat_params()
    prior = default_priors(base)
    base_vec = extract_fitted(base)
    x0 = seeded_initial(base)
    t = sample_times()
    covered = 0
    reps = 20
    for rep in range(reps):
        rng = np.random.default_rng(1000 + rep)
        vec = base_vec * rng.uniform(0.6, 1.4, 10)
        truth = apply_fitted(base, vec)
        obs = synth_data(truth, x0, t, 0.02, seed=500 + rep)
        post = abc_rejection(prior, obs, base, n_draws=250,
                             accept_fraction=0.08, seed=rep, initial=x0)
        lo, hi = post.interval(0.95)
        if np.all(lo <= vec) and np.all(vec <= hi):
            covered += 1
    assert covered >= 17


def test_abc_shrinkage_under_tighter_threshold():
    # paired draws: same seed and draw count, half the acceptance fraction;
    # the tighter posterior may not be materially wider in any coordinate
    base = small_habitat_params()
    truth, vec = truth_params()
    prior = default_priors(base)
    x0 = seeded_initial(base)
    obs = synth_data(truth, x0, sample_times(), 0.02, seed=21)
    wide = abc_rejection(prior, obs, base, n_draws=400, accept_fraction=0.2,
                         seed=9, initial=x0)
    tight = abc_rejection(prior, obs, base, n_draws=400, accept_fraction=0.1,
                          seed=9, initial=x0)
    assert tight.threshold <= wide.threshold
    # nested accepted sets: the tight set is the better half of the wide one
    assert np.all(np.isin(tight.distances, wide.distances))
    slack = 1.5   # sampling noise allowance for 40-point variances
    assert np.all(tight.variance() <= wide.variance() * slack)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def test_prevalence_csv_roundtrip(tmp_path):
    p = small_habitat_params()
    series = synth_data(p, seeded_initial(p), sample_times(), 0.02, seed=4)
    path = tmp_path / "obs.csv"
    save_prevalence_csv(series, path)
    text = path.read_text()
    assert text.splitlines()[0] == "time,human_prevalence,bovine_prevalence"
    assert "\r" not in text
    back = load_prevalence_csv(path)
    np.testing.assert_array_equal(back.times, series.times)
    np.testing.assert_array_equal(back.human_prevalence, series.human_prevalence)
    np.testing.assert_array_equal(back.bovine_prevalence, series.bovine_prevalence)


def test_load_rejects_malformed_csv(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,human_prevalence\n0.0,0.1\n")
    with pytest.raises(ValueError):
        load_prevalence_csv(path)
