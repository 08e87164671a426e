import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpoison import parity as pa


def test_constant_trace_without_switching():
    t = pa.simulate_trace(0.0, fidelity=1.0, n_samples=5000, seed=1)
    assert np.all(t.samples == t.samples[0])


def test_hidden_flip_rate():
    gamma, dt, n = 0.6, 0.01, 1_000_000
    t = pa.simulate_trace(gamma, 1.0, n_samples=n, dt_rep=dt, seed=2)
    flips = np.count_nonzero(t.hidden[1:] != t.hidden[:-1])
    # odd Poisson counts per interval: P = (1 - exp(-2 Gamma dt)) / 2
    p = 0.5 * (1 - np.exp(-2 * gamma * dt))
    expect = p * (n - 1)
    assert abs(flips - expect) < 3 * np.sqrt(expect)
    assert flips / ((n - 1) * dt) == pytest.approx(gamma, rel=0.03)


def test_zero_fidelity_is_coin_flip():
    n = 200_000
    t = pa.simulate_trace(0.6, fidelity=0.0, n_samples=n, seed=3)
    assert abs(t.samples.mean() - 0.5) < 3 * 0.5 / np.sqrt(n)
    assert abs(np.mean(t.samples == t.hidden) - 0.5) < 3 * 0.5 / np.sqrt(n)


def test_readout_error_rate():
    n = 200_000
    t = pa.simulate_trace(0.6, fidelity=0.8, n_samples=n, seed=4)
    assert np.mean(t.samples != t.hidden) == pytest.approx(0.1, abs=3 * np.sqrt(0.09 / n))


def test_invalid_trace_inputs():
    with pytest.raises(pa.ParityError):
        pa.simulate_trace(-1.0)
    with pytest.raises(pa.ParityError):
        pa.ParityTrace(np.zeros(10, dtype=bool), 0.01, 0.6, 1.5)
    with pytest.raises(pa.ParityError):
        pa.parity_psd(pa.simulate_trace(0.6, n_samples=100, seed=0))


def test_lorentzian_zero_frequency():
    for gamma, F, dt in [(0.6, 0.8, 0.01), (2.0, 0.3, 0.001)]:
        assert pa.lorentzian(0.0, gamma, F, dt) == pytest.approx(F ** 2 / gamma + (1 - F ** 2) * dt)


def test_white_floor_without_fidelity():
    t = [pa.simulate_trace(0.6, 0.0, seed=s) for s in range(20)]
    f, s = pa.parity_psd(t)
    assert np.mean(s) == pytest.approx(0.01, rel=0.02)
    assert np.allclose(pa.lorentzian(f, 0.6, 0.0, 0.01), 0.01)


def test_expected_periodogram_tends_to_lorentzian():
    f = np.linspace(0.01, 20, 50)
    approx = pa.expected_periodogram(f, 0.6, 0.8, 1e-4, 10 ** 7)
    assert np.allclose(approx, pa.lorentzian(f, 0.6, 0.8, 1e-4), rtol=2e-3)


def test_expected_periodogram_matches_direct_sum():
    n, dt, gamma, F = 64, 0.01, 3.0, 0.7
    f = np.array([1.5625, 7.8125, 20.3125])
    m = np.arange(-(n - 1), n)
    acf = F ** 2 * np.exp(-2 * gamma * dt * np.abs(m)) + (1 - F ** 2) * (m == 0)
    direct = dt * np.array([np.sum((1 - np.abs(m) / n) * acf * np.cos(2 * np.pi * fk * m * dt)) for fk in f])
    assert np.allclose(pa.expected_periodogram(f, gamma, F, dt, n), direct, rtol=1e-10)


def test_fit_recovers_switching_rate():
    traces = [pa.simulate_trace(0.6, 0.8, seed=100 + k) for k in range(50)]
    fit = pa.psd_and_fit(traces)
    assert fit.gamma_p == pytest.approx(0.6, rel=0.10)
    assert fit.fidelity == pytest.approx(0.8, rel=0.05)


def test_fit_unbiased_over_repetitions():
    est = [pa.psd_and_fit(pa.simulate_trace(0.6, 0.8, seed=1000 + k)).gamma_p for k in range(200)]
    assert abs(np.mean(est) / 0.6 - 1) < 0.03


def test_estimator_api():
    traces = [pa.simulate_trace(0.6, 0.8, seed=k) for k in range(10)]
    f, s = pa.parity_psd(traces)
    est = pa.LorentzianPSD(dt_rep=0.01, n_seg=2500).fit(f, s)
    assert est.predict(f).shape == f.shape
    assert set(est.get_params()) == {"dt_rep", "n_seg", "gamma0", "fidelity0", "n_iter"}
    assert est.result().covariance.shape == (2, 2)


def test_forward_examples():
    assert pa.coincidence_forward(0.5, 0.5, 0.0) == (0.25, 0.25, 0.0625)
    assert pa.coincidence_forward(0.0, 0.0, 0.2) == pytest.approx((0.1, 0.1, 0.05))
    for triple in [(0.5, 0.5, 0.0), (0.0, 0.0, 0.2)]:
        inv = pa.coincidence_invert(*pa.coincidence_forward(*triple))
        assert (inv.p_a, inv.p_b, inv.p_ab) == pytest.approx(triple, abs=1e-12)


def test_single_rates_halved_without_correlation():
    a, b, _ = pa.coincidence_forward(0.3, 0.1, 0.0)
    assert (a, b) == (0.15, 0.05)


def test_round_trip_random_triples():
    rng = np.random.default_rng(5)
    err = 0.0
    done = 0
    while done < 10_000:
        t = rng.dirichlet([1, 1, 1, 1])[:3]
        inv = pa.coincidence_invert(*pa.coincidence_forward(*t))
        err = max(err, np.max(np.abs(np.array([inv.p_a, inv.p_b, inv.p_ab]) - t)))
        done += 1
    assert err < 1e-9


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_inversion_consistent_with_forward(pa_, pb_, pab_):
    obs = pa.coincidence_forward(pa_, pb_, pab_)
    inv = pa.coincidence_invert(*obs)
    assert pa.coincidence_forward(inv.p_a, inv.p_b, inv.p_ab) == pytest.approx(obs, abs=1e-9)


def test_infeasible_observation():
    with pytest.raises(pa.InfeasibleError):
        pa.coincidence_invert(0.1, 0.1, 0.5)
    with pytest.raises(pa.InfeasibleError):
        pa.coincidence_invert(0.2, 0.1, 0.019)


def test_noisy_observation_projected():
    # slightly fewer coincidences than independent switching allows
    inv = pa.coincidence_invert(0.2, 0.1, 0.019, strict=False)
    assert not inv.exact
    assert inv.p_ab == 0.0
    assert (inv.p_a, inv.p_b) == pytest.approx((0.4, 0.2))


def test_identical_traces_coincide():
    t = pa.simulate_trace(0.6, 1.0, n_samples=20_000, seed=6)
    n = pa.coincident_edges(t, t)
    assert n.windows_ab == n.windows_a == n.windows_b > 0


def test_empty_trace_gives_no_coincidences():
    t = pa.simulate_trace(0.6, 1.0, n_samples=20_000, seed=7)
    flat = np.zeros(20_000, dtype=bool)
    n = pa.coincident_edges(t, flat)
    assert n.windows_b == 0 and n.windows_ab == 0


def test_independent_background_rate():
    n_samples, w = 2_000_000, 0.4
    a = pa.simulate_trace(0.5, 1.0, n_samples=n_samples, seed=8)
    b = pa.simulate_trace(0.3, 1.0, n_samples=n_samples, seed=9)
    r = pa.coincidence_rates(a, b, window_s=w)
    n_win = n_samples // 40
    expected = r.background_rate * w * n_win
    observed = r.rate_ab * w * n_win
    assert abs(observed - expected) < 3 * np.sqrt(expected)
    assert pa.background_rate(2.0, 3.0, 0.4) == pytest.approx(2.0 * 0.4 * 3.0 * 0.4 / 0.4)


def test_digitize_threshold():
    assert list(pa.digitize([0.0, 0.5, 0.5000001, 1.0])) == [False, False, True, True]
