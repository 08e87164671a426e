from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpoison import crystal as c
from qpoison.materials import default_materials
from qpoison.rng import RandomStream


@pytest.fixture(scope="module")
def si():
    return default_materials().substrate


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _random_dirs(n, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_longitudinal_along_100(si):
    sol = c.christoffel_solve(np.array([1.0, 0, 0]), si)
    assert sol.phase_velocity[2] == pytest.approx(np.sqrt(si.C11 / si.mass_density), rel=1e-12)
    assert sol.phase_velocity[2] == pytest.approx(8.43, abs=0.01)
    # transverse branches degenerate along a cube axis
    assert sol.degenerate


def test_transverse_split_along_110(si):
    sol = c.christoffel_solve(_unit([1, 1, 0]), si)
    rho = si.mass_density
    slow, fast = sorted([np.sqrt(si.C44 / rho), np.sqrt((si.C11 - si.C12) / (2 * rho))])
    assert sol.phase_velocity[0] == pytest.approx(slow, rel=1e-12)
    assert sol.phase_velocity[1] == pytest.approx(fast, rel=1e-12)
    assert not sol.degenerate


def test_longitudinal_is_fastest(si):
    disp = c.Dispersion(si, 45.0)
    v, _, _ = disp.phase_velocities(_random_dirs(2000))
    assert np.all(v[:, 2] > v[:, 1]) and np.all(v[:, 1] >= v[:, 0])


def test_eigenvalues_positive(si):
    disp = c.Dispersion(si, 0.0)
    _, _, w = disp.phase_velocities(_random_dirs(10_000, seed=1))
    assert np.all(np.isreal(w)) and np.all(w > 0)


@settings(max_examples=50, deadline=None)
@given(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda t: np.linalg.norm(t) > 0.1))
def test_solution_invariants(v):
    si = default_materials().substrate
    k = _unit(v)
    sol = c.christoffel_solve(k, si, rotation_deg=45.0)
    pol = sol.polarization
    assert np.allclose(pol @ pol.T, np.eye(3), atol=1e-9)
    # homogeneity of degree one: v_g . k equals the phase velocity
    assert np.allclose(sol.group_velocity @ k, sol.phase_velocity, rtol=1e-6)
    assert np.all(np.linalg.norm(sol.group_velocity, axis=1) <= 1.5 * sol.phase_velocity.max())


def test_isotropic_group_velocity_parallel(si):
    iso = replace(si, C11=si.C12 + 2 * si.C44)
    disp = c.Dispersion(iso, 0.0)
    k = _random_dirs(500, seed=2)
    vg = disp.group_velocities(k)
    v, _, _ = disp.phase_velocities(k)
    expect = v[..., :, None] * k[..., None, :]
    assert np.max(np.abs(vg - expect)) / v.max() < 1e-6


def test_rejects_non_unit_direction(si):
    with pytest.raises(c.CrystalError):
        c.christoffel_solve(np.array([1.0, 1.0, 0.0]), si)


def test_velocity_table_fourfold(si):
    tab = c.build_velocity_table(si, rotation_deg=45.0, n_mu=32, n_phi=64)
    speed = np.linalg.norm(tab.vg, axis=-1)
    # rotating the chip frame by 90 degrees shifts phi by a quarter period
    assert np.allclose(speed, np.roll(speed, 16, axis=2), rtol=1e-9)
    assert tab.mean_speed[0] < tab.mean_speed[1] < tab.mean_speed[2]


def test_power_laws(si):
    nu = 3e11
    assert c.isotope_scattering_rate(2 * nu, si.isotope_rate_B) == pytest.approx(
        16 * c.isotope_scattering_rate(nu, si.isotope_rate_B))
    assert c.anharmonic_rate(2 * nu, si.anharmonic_rate_A) == pytest.approx(
        32 * c.anharmonic_rate(nu, si.anharmonic_rate_A))
    assert c.isotope_scattering_rate(0.0, si.isotope_rate_B) == 0.0
    assert c.anharmonic_rate(0.0, si.anharmonic_rate_A) == 0.0


def test_debye_phonons_downconvert_before_crossing(si):
    rate = c.anharmonic_rate(15e12, si.anharmonic_rate_A)
    assert np.isfinite(rate) and np.isfinite(c.isotope_scattering_rate(15e12, si.isotope_rate_B))
    lifetime_ns = 1e9 / rate
    assert lifetime_ns < 1e3
    assert lifetime_ns < 525.0 / si.v_longitudinal


def test_isotope_directions_uniform(si):
    cum = np.cumsum([0.5, 0.4, 0.1])
    dirs, _ = c.sample_isotope_scatter(RandomStream(5, 0), 1_000_000, cum)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)
    assert np.linalg.norm(dirs.mean(axis=0)) < 0.002


def test_branch_occupancy_matches_dos(si):
    tab = c.build_velocity_table(si, n_mu=32, n_phi=64)
    w = c.branch_weights(tab, si.dos_weight_T, si.dos_weight_L)
    n = 400_000
    _, br = c.sample_isotope_scatter(RandomStream(6, 0), n, np.cumsum(w))
    frac_L = np.mean(br == 2)
    sigma = np.sqrt(0.0925 * 0.9075 / n)
    assert abs(frac_L - 0.0925) < 3 * sigma
    assert w.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("kernel", [c.KERNEL_STANDARD, c.KERNEL_UNIFORM])
def test_anharmonic_daughters_conserve_energy(kernel):
    parent = 62_036_000_000
    e1, e2, chan = c.sample_anharmonic_decay(RandomStream(7, 0), parent, n=1_000_000, kernel=kernel)
    assert np.all(e1 + e2 == parent)
    assert np.all((e1 > 0) & (e2 > 0))
    assert set(np.unique(chan)) <= {c.DECAY_LTT, c.DECAY_LLT}


def test_anharmonic_chain_conserves_energy():
    stream = RandomStream(8, 0)
    pool = [10 ** 12]
    for _ in range(12):
        parent = max(pool)
        pool.remove(parent)
        e1, e2, _ = c.sample_anharmonic_decay(stream, parent)
        pool += [int(e1[0]), int(e2[0])]
    assert sum(pool) == 10 ** 12


def test_ltt_fraction():
    _, _, chan = c.sample_anharmonic_decay(RandomStream(9, 0), 10 ** 9, n=200_000)
    assert np.mean(chan == c.DECAY_LTT) == pytest.approx(0.75, abs=0.005)
