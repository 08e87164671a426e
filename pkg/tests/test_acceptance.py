"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import GAMMA_DEVICES, TIMINGS
from qpoison import cascade, materials as m, parity as pa, qpdynamics as qd, transport as tr
from qpoison.rng import RandomStream

TABLE_ROWS = [("Al", 3.58, 0.795), ("Nb", 2.44, 0.745), ("Ti", 3.60, 0.792), ("Cu", 2.61, 0.736)]


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _gamma_trace(rc, led):
    return qd.gamma_trace(led, rc.impact().n_pairs(), rc.qp_params(), rc.analysis().dt_us)


def _footprint(rc, led):
    an = rc.analysis()
    pitch = rc.section("geometry").get("electrode_pitch_um", 200.0)
    return qd.footprint(_gamma_trace(rc, led), led.electrode_centers, pitch, an.threshold_t1_us, an.f01_GHz,
                        an.delta_ueV)


def test_criterion_01_table(capsys):
    t0 = time.perf_counter()
    db = m.default_materials()
    w_T, w_L = db.substrate.dos_weight_T, db.substrate.dos_weight_L
    worst_v = worst_p = 0.0
    for name, v_s, p_abs in TABLE_ROWS:
        f = db.film(name)
        worst_v = max(worst_v, abs(m.weighted_sound_speed(f.v_T, f.v_L, w_T, w_L) - v_s))
        worst_p = max(worst_p, abs(m.absorption_probability(f.eta_T, f.eta_L, w_T, w_L) - p_abs))
    dt = time.perf_counter() - t0
    ok = worst_v <= 0.01 and worst_p <= 0.001 and dt < 1.0
    report(capsys, 1, ok, f"max |dv_s| {worst_v:.4f} um/ns, max |dp_abs| {worst_p:.5f}, {dt:.2f} s")


def test_criterion_02_lifetimes(capsys):
    t0 = time.perf_counter()
    db = m.default_materials()
    tau_ti = m.ti_phonon_lifetime(m.ti_lifetime_inputs(db))
    cu = db.film("Cu")
    inv_gamma = 1.0 / m.normal_phonon_rate_from_energy(2 * db.film("Al").delta, cu)
    beta = cu.coupling
    dt = time.perf_counter() - t0
    checks = {"tau_Ti": abs(tau_ti / 0.414 - 1) <= 0.05, "1/Gamma_Cu": abs(inv_gamma / 1.2 - 1) <= 0.05,
              "beta_L": abs(beta / 0.16 - 1) <= 0.05, "runtime": dt < 1.0}
    failed = [k for k, v in checks.items() if not v]
    report(capsys, 2, not failed, f"tau_Ti {tau_ti:.4f} ns, 1/Gamma {inv_gamma:.4f} ns, beta_L {beta:.4f}, "
                                  f"{dt:.2f} s" + (f"; failing: {', '.join(failed)}" if failed else ""))


def test_criterion_03_injector_yield(capsys):
    al = m.default_materials().film("Al")
    t0 = time.perf_counter()
    y = cascade.injector_yield(1.0, al.delta, RandomStream(2024), 1_000_000)
    dt = time.perf_counter() - t0
    report(capsys, 3, abs(y - 1.673) <= 0.01 and dt < 60, f"yield {y:.4f} per 1 meV pair (1e6 trials), {dt:.1f} s")


def test_criterion_04_pairs_and_gap(capsys):
    n = tr.n_eh_gamma(100.0)
    gap = m.bilayer_gap(40, 80)
    report(capsys, 4, n == 27_777 and round(gap) == 191, f"N_eh {n}, bilayer gap {gap:.2f} ueV")


def test_criterion_05_injection_pipeline(capsys, injection_nonmetal):
    rc, led = injection_nonmetal
    assert rc.qp_params().s_per_us == pytest.approx(0.045)
    assert not rc.transport().anisotropic and led.n_source == 1_000_000
    trace = qd.injection_trace(led, rc.pulse(), rc.qp_params(), rc.analysis().dt_us)
    e = led.electrode_labels.index("Q4")
    peak, t_peak = trace.peak(e)
    tau = qd.recovery_time_constant(trace.t_rel_us, trace.x[e])
    dt = TIMINGS.get("inject-nonmetal", float("nan"))
    ok = 7.5e-6 / 2 <= peak <= 7.5e-6 * 2 and abs(t_peak - 30) <= 15 and abs(tau - 60) <= 20 and not dt > 600
    report(capsys, 5, ok, f"Q4 peak {peak:.3g} at {t_peak:.1f} us after pulse end, recovery {tau:.1f} us, "
                          f"transport {dt:.0f} s")


def test_criterion_06_mitigation_ratio(capsys, injection_nonmetal, injection_cu10):
    yields = [led.counters[tr.C_QP] / led.n_source for _, led in (injection_nonmetal, injection_cu10)]
    ratio = yields[0] / yields[1] if yields[1] > 0 else np.inf
    dt = TIMINGS.get("inject-nonmetal", 0.0) + TIMINGS.get("inject-cu10", 0.0)
    report(capsys, 6, ratio >= 100 and dt < 1200,
           f"QPs per phonon {yields[0]:.3g} (non-Cu) vs {yields[1]:.3g} (10 um Cu), ratio {ratio:.0f}, {dt:.0f} s")


def test_criterion_07_gamma_footprints(capsys, gamma_runs):
    ext, rec, peaks = {}, {}, {}
    for name in GAMMA_DEVICES:
        rc, led = gamma_runs[name]
        assert led.n_source >= 10_000
        fp = _footprint(rc, led)
        ext[name], rec[name] = fp.max_extent_um, fp.recovery_time_us()
        above = int(np.argmin(np.linalg.norm(led.electrode_centers - np.array(rc.impact().position[:2]), axis=1)))
        peaks[name] = float(_gamma_trace(rc, led).x[above].max())
    geo = gamma_runs["gamma-nonmetal"][0].section("geometry")
    chip_row = geo.get("grid_n", 39) * geo.get("electrode_pitch_um", 200.0)
    nm, cu1, cu10, ti2 = (ext[n] for n in GAMMA_DEVICES)
    checks = {
        "non-metal full chip": nm >= 0.9 * chip_row,
        "non-metal recovery": abs(rec["gamma-nonmetal"] - 150) <= 60,
        "Cu10 extent": abs(cu10 - 3000) <= 1500,
        "Cu10 recovery": rec["gamma-cu10"] < 100,
        "ordering": nm > cu1 > cu10 and abs(cu10 - ti2) <= 0.2 * max(cu10, ti2),
        "peak above impact": 6e-4 / 2 <= max(peaks.values()) <= 6e-4 * 2,
        "runtime": not TIMINGS.get("gamma", 0.0) > 3600,
    }
    failed = [k for k, v in checks.items() if not v]
    rows = ", ".join(f"{n[6:]} {ext[n]:.0f} um/{rec[n]:.0f} us/{peaks[n]:.2e}" for n in GAMMA_DEVICES)
    report(capsys, 7, not failed, f"extent/recovery/peak: {rows}" + (f"; failing: {', '.join(failed)}" if failed else ""))


def test_criterion_08_caustics(capsys):
    sub = m.default_materials().substrate
    t0 = time.perf_counter()
    counts, _ = tr.caustic_map(sub, n_phonons=1_000_000, seed=0)
    dt = time.perf_counter() - t0
    z = tr.fourfold_symmetry_zscore(counts)
    ratio = counts.max() / np.median(counts)
    report(capsys, 8, z < 4 and ratio > 3 and dt < 900,
           f"max fourfold z {z:.2f}, max/median {ratio:.1f}, {dt:.1f} s")


def test_criterion_09_oracles(capsys):
    t0 = time.perf_counter()
    # steady state G/s with r = 0, checked after 10/s
    p = qd.QpModelParams(r_per_us=0.0, s_per_us=0.05)
    G = 1e-6
    ss = qd.solve_xqp(np.full((1, 400), G), 1.0, p, dt_us=0.01)
    i = int(np.searchsorted(ss.t_us, 10 / p.s_per_us))
    err_ss = abs(ss.x[0, i] / (G / p.s_per_us * (1 - np.exp(-p.s_per_us * ss.t_us[i]))) - 1)
    # Riccati decay at dt = 1 ns
    p = qd.QpModelParams(r_per_us=100.0, s_per_us=0.0)
    ric = qd.solve_xqp(np.zeros((1, 50)), 1.0, p, dt_us=1e-3, x0=1e-3)
    err_ric = np.max(np.abs(ric.x[0] * (1 + p.r_per_us * 1e-3 * ric.t_us) / 1e-3 - 1))
    # x_qp <-> delta Gamma_1 round trip
    xs = np.logspace(-10, -2, 1000)
    back = qd.xqp_from_delta_gamma1(qd.delta_gamma1_from_xqp(xs))
    err_rt = np.max(np.abs(back - xs) / xs)
    # coincidence round trip on random triples
    rng = np.random.default_rng(9)
    err_co = 0.0
    for t in rng.dirichlet([1, 1, 1, 1], size=10_000)[:, :3]:
        inv = pa.coincidence_invert(*pa.coincidence_forward(*t))
        err_co = max(err_co, float(np.max(np.abs(np.array([inv.p_a, inv.p_b, inv.p_ab]) - t))))
    # PSD fit on a synthetic ensemble
    fit = pa.psd_and_fit([pa.simulate_trace(0.6, 0.8, seed=500 + k) for k in range(50)])
    dt = time.perf_counter() - t0
    checks = {"steady": err_ss <= 1e-6, "riccati": err_ric <= 1e-4, "round trip": err_rt <= 1e-12,
              "coincidence": err_co <= 1e-9, "psd": abs(fit.gamma_p / 0.6 - 1) <= 0.10, "runtime": dt < 120}
    failed = [k for k, v in checks.items() if not v]
    report(capsys, 9, not failed,
           f"steady {err_ss:.1e}, Riccati {err_ric:.1e}, x_qp round trip {err_rt:.1e}, coincidence {err_co:.1e}, "
           f"Gamma_p {fit.gamma_p:.3f} /s, {dt:.1f} s" + (f"; failing: {', '.join(failed)}" if failed else ""))


def test_criterion_10_determinism_and_audit(capsys, injection_nonmetal, injection_cu10, injection_cu1,
                                            gamma_runs):
    rc, led = gamma_runs["gamma-cu10"]
    again = tr.run_gamma(rc.geometry(), replace(rc.transport(), workers=3, chunk_size=1000), impact=rc.impact())
    same_gamma = again.identical(led)
    rc, led = injection_cu1
    again = tr.run_injection(rc.geometry(), replace(rc.transport(), workers=2))
    same_inject = again.identical(led)
    ledgers = [injection_nonmetal[1], injection_cu10[1], injection_cu1[1]] + [v[1] for v in gamma_runs.values()]
    worst = max(x.energy_audit() for x in ledgers)
    ok = same_gamma and same_inject and worst <= 1e-6
    report(capsys, 10, ok, f"gamma workers 1 vs 3 identical: {same_gamma}, injection workers 1 vs 2 identical: "
                           f"{same_inject}, worst energy audit {worst:.1e} over {len(ledgers)} ledgers")
