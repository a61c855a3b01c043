from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsfilter.dynamics import Dynamics, GaussianPrior, NoiseSpec, SolverConfig
from nsfilter.filtering import (
    DegenerateEnsembleError, Ensemble, FilterModel, ParticleFilter, ParticleStreams, PcnConfig, TemperingError,
    assimilate_naive, assimilate_tempered, ess, next_temperature, pcn_init_move, pcn_move, propagate,
    systematic_resample,
)
from nsfilter.observation import build_observer, uniform_stations
from nsfilter.spectral import Lattice


def ess_grid(log_incr, phi_prev, alpha_frac, step=1e-6):
    """Brute force: smallest grid phi whose ESS drops to alpha_frac * N (1 if none)."""
    phis = phi_prev + np.arange(1, int(round((1 - phi_prev) / step)) + 1) * step
    w = (phis - phi_prev)[:, None] * log_incr[None, :]
    w -= w.max(axis=1, keepdims=True)
    w = np.exp(w)
    e = w.sum(axis=1) ** 2 / (w**2).sum(axis=1)
    below = np.flatnonzero(e <= alpha_frac * len(log_incr))
    return 1.0 if below.size == 0 else phis[below[0]]


def make_model(L=2, sigma_obs=0.5, nonlinear=False, n_stations=1, inner=4, dt_obs=0.4):
    lat = Lattice(L)
    noise = NoiseSpec.power_law(lat)
    dyn = Dynamics(lat, SolverConfig(0.1, dt_obs / inner, nonlinear=nonlinear), noise)
    obs = build_observer(uniform_stations(n_stations), 0.1, lat, sigma_obs)
    prior = GaussianPrior(lat, np.zeros(lat.size), 3.0, 0.5)
    return FilterModel(dyn, obs, prior)


# -- ESS -------------------------------------------------------------------------

def test_ess_hand_cases():
    assert abs(ess(np.zeros(100)) - 100) < 1e-12
    assert abs(ess(np.array([0.0] + [-np.inf] * 9)) - 1) < 1e-12
    assert abs(ess(np.log([0.5, 0.3, 0.2])) - 1 / 0.38) < 1e-12
    with pytest.raises(DegenerateEnsembleError):
        ess(np.full(4, -np.inf))


@given(st.lists(st.floats(-1e3, 0), min_size=2, max_size=200))
@settings(max_examples=100, deadline=None)
def test_ess_bounds(logw):
    e = ess(np.array(logw))
    assert 1 - 1e-12 <= e <= len(logw) + 1e-9


def test_ess_stable_for_large_spreads():
    logw = np.array([0.0, -1e3, 5e2, 5e2 - np.log(3)])
    assert abs(ess(logw) - 1 / ((0.75) ** 2 + 0.25**2)) < 1e-12


# -- tempering --------------------------------------------------------------------

def test_next_temperature_equal_weights():
    assert next_temperature(np.full(10, -3.0), 0.0, 0.5) == 1.0
    assert next_temperature(np.full(10, -3.0), 0.7, 0.5) == 1.0


def test_next_temperature_two_particles():
    r = np.array([0.0, -10.0])
    phi = next_temperature(r, 0.0, 0.75)
    assert abs(phi - ess_grid(r, 0.0, 0.75)) < 1e-5
    # ESS(phi) = 1.5 on the root
    assert abs(ess(phi * r) - 1.5) < 1e-6


def test_next_temperature_monotone_in_spread():
    base = np.random.default_rng(0).standard_normal(50)
    phis = [next_temperature(c * base, 0.0, 0.5) for c in (1, 2, 4, 8, 16)]
    assert all(a >= b for a, b in zip(phis, phis[1:]))
    assert phis[-1] < 1


def test_next_temperature_with_carried_weights_and_failures():
    r = np.array([0.0, -5.0, -np.inf, -2.0])
    phi = next_temperature(r, 0.2, 0.5)
    assert 0.2 < phi <= 1
    w_prev = np.log([0.1, 0.4, 0.3, 0.2])
    phi2 = next_temperature(np.array([0.0, -5.0, -1.0, -2.0]), 0.0, 0.5, w_prev)
    assert 0 < phi2 <= 1
    with pytest.raises(ValueError):
        next_temperature(r, 1.0, 0.5)
    # carried weights already below the target leave the root undefined
    with pytest.raises(ValueError):
        next_temperature(np.zeros(4), 0.0, 0.5, np.log([0.97, 0.01, 0.01, 0.01]))


@given(st.integers(0, 10_000), st.floats(0.0, 0.9))
@settings(max_examples=20, deadline=None)
def test_next_temperature_exceeds_previous(seed, phi_prev):
    r = 30 * np.random.default_rng(seed).standard_normal(20)
    phi = next_temperature(r, phi_prev, 0.5)
    assert phi > phi_prev
    if phi < 1:
        assert abs(ess((phi - phi_prev) * r) - 10) < 1e-3


# -- resampling --------------------------------------------------------------------

def test_resample_degenerate_and_uniform():
    rng = np.random.default_rng(0)
    assert np.all(systematic_resample(rng, np.eye(5)[2]) == 2)
    np.testing.assert_array_equal(systematic_resample(rng, np.full(7, 1 / 7)), np.arange(7))


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=60), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_resample_offspring_bounds(w, seed):
    w = np.array(w)
    if w.sum() == 0:
        w[0] = 1.0
    w = w / w.sum()
    idx = systematic_resample(np.random.default_rng(seed), w)
    counts = np.bincount(idx, minlength=len(w))
    N = len(w)
    assert counts.sum() == N
    assert np.all(counts >= np.floor(N * w - 1e-9)) and np.all(counts <= np.ceil(N * w + 1e-9))


def test_resample_unbiased():
    w = np.array([0.05, 0.3, 0.12, 0.33, 0.2])
    rng = np.random.default_rng(1)
    counts = np.zeros(5)
    reps = 10_000
    for _ in range(reps):
        counts += np.bincount(systematic_resample(rng, w), minlength=5)
    np.testing.assert_allclose(counts / reps, 5 * w, rtol=0.02)


# -- pCN ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    model = make_model(L=2)
    rng = np.random.default_rng(0)
    y = model.observer.predict(model.prior.sample(rng)) + 0.3
    streams = ParticleStreams(1, 20)
    ens = Ensemble.from_states(model.prior.sample(np.random.default_rng(2), 20))
    ens = propagate(streams, ens, model, y, 0.0, 0.4, guided=True)
    return model, y, ens


def test_pcn_rho_one_is_identity(tiny):
    model, y, ens = tiny
    new, acc = pcn_move(ParticleStreams(3, 20), ens, 0.7, model, y, 0.4, 1.0, guided=True)
    assert acc.all()
    np.testing.assert_array_equal(new.state, ens.state)
    new, acc = pcn_init_move(ParticleStreams(3, 20), ens, 0.7, model, y, 0.4, 1.0, guided=True)
    assert acc.all()
    np.testing.assert_array_equal(new.start, ens.start)


def test_pcn_phi_zero_always_accepts(tiny):
    model, y, ens = tiny
    new, acc = pcn_move(ParticleStreams(4, 20), ens, 0.0, model, y, 0.4, 0.3, guided=True)
    assert acc.all() and np.all(new.state != ens.state)
    np.testing.assert_array_equal(new.start, ens.start)
    new, acc = pcn_init_move(ParticleStreams(4, 20), ens, 0.0, model, y, 0.4, 0.3, guided=True)
    assert acc.all()


def test_pcn_rejects_failed_proposals(tiny):
    model, y, ens = tiny
    bad = Ensemble(start=ens.start, state=ens.state, noise=ens.noise * 0 + 1e200, girsanov=ens.girsanov,
                   loglik=ens.loglik, t0=0.0, dt=ens.dt)
    # rho = 1 keeps the overflowing noise, so every proposal blows up
    with np.errstate(all="ignore"):
        new, acc = pcn_move(ParticleStreams(5, 20), bad, 1.0, model, y, 0.4, 1.0, guided=False)
    assert not acc.any()
    np.testing.assert_array_equal(new.state, ens.state)


def test_pcn_init_move_preserves_initial_law():
    """With no observation (phi = 0) the initial-condition crank leaves N(mu, C) invariant."""
    model = make_model(L=1, inner=1)
    n_chains, n_steps = 10, 10_000
    streams = ParticleStreams(6, n_chains)
    ens = Ensemble.from_states(model.prior.mu + np.zeros((n_chains, model.prior.lattice.size)))
    y = np.zeros(model.observer.dim)
    ens = propagate(streams, ens, model, y, 0.0, 0.4, guided=False)
    i = 0
    samples = np.empty((n_steps, n_chains))
    for s in range(n_steps):
        ens, _ = pcn_init_move(streams, ens, 0.0, model, y, 0.4, 0.9, guided=False)
        samples[s] = ens.start[:, i].real
    samples = samples[200:]
    # batch means over 49 time blocks for the autocorrelated chains
    blocks = samples.reshape(49, -1)
    m = blocks.mean(axis=1)
    assert abs(samples.mean()) < 3 * m.std(ddof=1) / np.sqrt(49)
    v = (blocks**2).mean(axis=1)
    assert abs(samples.var() - model.prior.std[i] ** 2) < 3 * v.std(ddof=1) / np.sqrt(49)


def test_pcn_detailed_balance_flows():
    """Stationary flows between two coarse bins are symmetric for a reversible kernel."""
    model = make_model(L=1, sigma_obs=0.3, inner=2)
    lat = model.dynamics.lattice
    rng = np.random.default_rng(8)
    y = model.observer.predict(model.prior.sample(rng))
    n_chains = 200
    streams = ParticleStreams(9, n_chains)
    ens = Ensemble.from_states(np.zeros((n_chains, lat.size)))
    ens = propagate(streams, ens, model, y, 0.0, 0.4, guided=True)
    for _ in range(100):
        ens, _ = pcn_move(streams, ens, 1.0, model, y, 0.4, 0.6, guided=True)
    k = lat.index((1, 0))
    cut = np.median(ens.state[:, k].real)
    ab = ba = 0
    flows = []
    for _ in range(300):
        before = ens.state[:, k].real > cut
        ens, _ = pcn_move(streams, ens, 1.0, model, y, 0.4, 0.6, guided=True)
        after = ens.state[:, k].real > cut
        f_ab = np.sum(~before & after)
        f_ba = np.sum(before & ~after)
        ab += f_ab
        ba += f_ba
        flows.append(f_ab - f_ba)
    flows = np.array(flows, dtype=float)
    se = flows.std(ddof=1) * np.sqrt(len(flows))
    assert ab > 0 and ba > 0
    assert abs(ab - ba) < 3 * se


# -- assimilation -------------------------------------------------------------------

def test_naive_flat_likelihood_keeps_all_particles():
    model = make_model(sigma_obs=1e8)
    streams = ParticleStreams(10, 200)
    ens = Ensemble.from_states(model.prior.sample(np.random.default_rng(11), 200))
    y = np.zeros(model.observer.dim)
    out, diag = assimilate_naive(streams, np.random.default_rng(12), ens, y, model, 0.0, 0.4, guided=False)
    assert diag.ess > 0.9 * 200
    assert np.all(out.logw == 0)


def test_tempered_flat_likelihood_single_level():
    model = make_model(sigma_obs=1e8)
    streams = ParticleStreams(13, 50)
    ens = Ensemble.from_states(model.prior.sample(np.random.default_rng(14), 50))
    y = np.zeros(model.observer.dim)
    out, diag = assimilate_tempered(streams, np.random.default_rng(15), ens, y, model, 0.0, 0.4,
                                    PcnConfig(0.5, 2), guided=True)
    assert diag.levels == 1 and diag.tempering.phis == [0.0, 1.0]


def test_tempering_cap():
    model = make_model(sigma_obs=1e-4, n_stations=2)
    ens = Ensemble.from_states(model.prior.sample(np.random.default_rng(16), 30))
    y = model.observer.predict(model.prior.sample(np.random.default_rng(17)))
    with pytest.raises(TemperingError):
        assimilate_tempered(ParticleStreams(18, 30), np.random.default_rng(19), ens, y, model, 0.0, 0.4,
                            PcnConfig(0.5, 1), guided=False, max_levels=2)


def test_tempering_record_is_increasing():
    model = make_model(sigma_obs=0.01, n_stations=2)
    ens = Ensemble.from_states(model.prior.sample(np.random.default_rng(20), 40))
    y = model.observer.predict(model.prior.sample(np.random.default_rng(21)))
    out, diag = assimilate_tempered(ParticleStreams(22, 40), np.random.default_rng(23), ens, y, model, 0.0, 0.4,
                                    PcnConfig(0.5, 2), guided=False)
    phis = diag.tempering.phis
    assert phis[0] == 0 and phis[-1] == 1 and np.all(np.diff(phis) > 0)
    assert diag.levels > 1
    assert all(abs(e - 20) < 1e-3 for e in diag.tempering.ess[:-1])
    assert all(0 <= a <= 1 for a in diag.tempering.accept)


def test_carry_weights_option():
    model = make_model(sigma_obs=0.05, n_stations=2)
    ens = Ensemble.from_states(model.prior.sample(np.random.default_rng(24), 40))
    y = model.observer.predict(model.prior.sample(np.random.default_rng(25)))
    out, diag = assimilate_tempered(ParticleStreams(26, 40), np.random.default_rng(27), ens, y, model, 0.0, 0.4,
                                    PcnConfig(0.5, 2), guided=True, resample_final=False)
    assert np.ptp(out.logw) > 0
    assert abs(np.exp(out.logw).sum() - 1) < 1e-12
    # collapsed carried weights are resampled before tempering starts
    skewed = replace(ens, logw=np.where(np.arange(40) < 2, 0.0, -50.0))
    out2, _ = assimilate_tempered(ParticleStreams(26, 40), np.random.default_rng(27), skewed, y, model, 0.0, 0.4,
                                  PcnConfig(0.5, 2), guided=True)
    survivors = skewed.state[:2]
    assert all(any(np.array_equal(row, s) for s in survivors) for row in out2.start)


@pytest.mark.parametrize("variant", ["pf", "ispf", "pft", "ispft"])
def test_filter_is_deterministic(variant):
    model = make_model(L=3, nonlinear=True, n_stations=2, sigma_obs=0.2)
    y = model.observer.predict(model.prior.sample(np.random.default_rng(28)))
    runs = []
    for _ in range(2):
        pf = ParticleFilter(model, 16, variant, PcnConfig(0.5, 2, 0.9), seed=99)
        d = pf.run([0.4, 0.8], [y, y])
        runs.append((pf.ensemble.state, [x.ess for x in d]))
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_filter_rejects_bad_arguments():
    model = make_model()
    with pytest.raises(ValueError):
        ParticleFilter(model, 10, "bogus")
    with pytest.raises(ValueError):
        ParticleFilter(model, 1, "pf")
    with pytest.raises(ValueError):
        PcnConfig(rho=1.5)


def test_perfect_init_disables_initial_moves():
    model = make_model(sigma_obs=0.05, n_stations=2)
    v0 = model.prior.sample(np.random.default_rng(29))
    pf = ParticleFilter(model, 20, "ispft", PcnConfig(0.5, 2, 0.9), seed=1, init=v0)
    pf.assimilate(0.4, model.observer.predict(v0))
    np.testing.assert_array_equal(pf.ensemble.start, np.broadcast_to(v0, (20, v0.size)))
