"""Command-line entry point: ``qpoison <subcommand> ...``.

Every output directory receives CSV files plus one ``manifest.json``.
Seeds: the master seed plus the particle index defines each particle's
random stream, so sharded or parallel runs reproduce a sequential run.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, parity, qpdynamics, transport
from .config import CONFIG_ENV, ConfigError, RunConfig, resolve_config
from .geometry import GeometryError
from .materials import MaterialError, write_report

log = logging.getLogger("qpoison")

EXIT_INVALID = 2
EXIT_FIT = 3


def versions():
    import numba
    import scipy
    import sklearn
    return {"qpoison": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "numba": numba.__version__, "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def write_manifest(out, cfg: RunConfig | None, outputs, started, **extra):
    man = {"config_hash": cfg.hash() if cfg else None, "versions": versions(),
           "wall_clock_s": time.perf_counter() - started, "outputs": sorted(outputs)}
    man.update(extra)
    with open(Path(out) / "manifest.json", "w") as f:
        json.dump(man, f, indent=2, sort_keys=True, default=transport._json_default)


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_trace_csv(path, trace: qpdynamics.XqpTrace, labels, rows=None):
    """Long-format x_qp(t) table for the given electrode rows (default all)."""
    rows = range(trace.x.shape[0]) if rows is None else rows
    with open(path, "w") as f:
        f.write("electrode_id,label,t_us,x_qp_ratio\n")
        for e in rows:
            for t, x in zip(trace.t_rel_us, trace.x[e]):
                f.write(f"{e},{labels[e]},{t:.6g},{x:.6e}\n")


# ---- subcommands ----

def cmd_materials(args, cfg: RunConfig):
    db = cfg.materials()
    if args.out:
        out = _outdir(args.out)
        with open(out / "materials.csv", "w") as f:
            write_report(f, db)
        write_manifest(out, cfg, ["materials.csv"], args.started)
    else:
        write_report(sys.stdout, db)
    return 0


def _transport_cfg(args, cfg, count_flag):
    over = {"seed": args.seed, "n_particles": getattr(args, count_flag), "workers": args.workers}
    cfg = cfg.with_overrides("transport", **over)
    return cfg, cfg.transport()


def cmd_inject(args, cfg: RunConfig):
    cfg, tcfg = _transport_cfg(args, cfg, "phonons")
    geom = cfg.geometry()
    db = cfg.materials()
    ledger = transport.run_injection(geom, tcfg, db)
    out = _outdir(args.out)
    trace = qpdynamics.injection_trace(ledger, cfg.pulse(), cfg.qp_params(), cfg.analysis().dt_us)
    write_trace_csv(out / "xqp.csv", trace, ledger.electrode_labels)
    transport.write_ledger(ledger, out, {"config_hash": cfg.hash(), "versions": versions(),
                                         "outputs": ["electrodes.csv", "ledger.csv", "xqp.csv"],
                                         "wall_clock_s": time.perf_counter() - args.started})
    tot = ledger.totals()
    log.info("injected %d phonons: %d QPs, energy audit %.2e", ledger.n_source, tot["qp_total"],
             tot["energy_audit_rel"])
    return 0


def cmd_gamma(args, cfg: RunConfig):
    cfg, tcfg = _transport_cfg(args, cfg, "pairs")
    geom = cfg.geometry()
    db = cfg.materials()
    ledger = transport.run_gamma(geom, tcfg, db, cfg.impact())
    out = _outdir(args.out)
    transport.write_ledger(ledger, out, {"config_hash": cfg.hash(), "versions": versions(),
                                         "outputs": ["electrodes.csv", "ledger.csv"],
                                         "wall_clock_s": time.perf_counter() - args.started})
    tot = ledger.totals()
    log.info("traced %d pairs: %d QPs, energy audit %.2e", ledger.n_source, tot["qp_total"],
             tot["energy_audit_rel"])
    return 0


def _trace_for_ledger(ledger, cfg: RunConfig):
    params = cfg.qp_params()
    dt = cfg.analysis().dt_us
    if ledger.source_kind == "gamma":
        n_eh = ledger.meta.get("source", {}).get("n_eh_gamma") or cfg.impact().n_pairs()
        return qpdynamics.gamma_trace(ledger, n_eh, params, dt)
    return qpdynamics.injection_trace(ledger, cfg.pulse(), params, dt)


def cmd_footprint(args, cfg: RunConfig):
    ledger = transport.read_ledger(args.ledger)
    trace = _trace_for_ledger(ledger, cfg)
    an = cfg.analysis()
    pitch = cfg.section("geometry").get("electrode_pitch_um", 200.0)
    fp = qpdynamics.footprint(trace, ledger.electrode_centers, pitch, an.threshold_t1_us, an.f01_GHz,
                              an.delta_ueV)
    out = _outdir(args.out)
    with open(out / "extent.csv", "w") as f:
        f.write("t_us,extent_um\n")
        for t, e in zip(fp.t_us, fp.extent_um):
            f.write(f"{t:.6g},{e:.6g}\n")
    times = args.times if args.times else [0.5, 1.0, 10.0, 50.0, 100.0]
    idx = sorted({int(np.argmin(np.abs(trace.t_rel_us - t))) for t in times})
    c = ledger.electrode_centers
    with open(out / "xqp_map.csv", "w") as f:
        f.write("t_us,x_um,y_um,x_qp_ratio\n")
        for k in idx:
            for e in range(c.shape[0]):
                f.write(f"{trace.t_rel_us[k]:.6g},{c[e, 0]:.6g},{c[e, 1]:.6g},{trace.x[e, k]:.6e}\n")
    write_manifest(out, cfg, ["extent.csv", "xqp_map.csv"], args.started, ledger=str(args.ledger),
                   threshold_xqp=fp.threshold_xqp, max_extent_um=fp.max_extent_um,
                   recovery_time_us=fp.recovery_time_us())
    log.info("max extent %.0f um, recovered after %.0f us", fp.max_extent_um, fp.recovery_time_us())
    return 0


def _electrode_index(ledger, key):
    if key is None:
        return 0
    if key in ledger.electrode_labels:
        return ledger.electrode_labels.index(key)
    try:
        return int(key)
    except ValueError:
        raise ConfigError([f"unknown electrode {key!r}"]) from None


def cmd_fit_s(args, cfg: RunConfig):
    ledger = transport.read_ledger(args.ledger)
    data = np.loadtxt(args.trace, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < 2:
        raise ConfigError([f"{args.trace}: expected columns time_us,xqp"])
    e = _electrode_index(ledger, args.electrode)
    params = cfg.qp_params()
    if ledger.source_kind == "gamma":
        n_eh = ledger.meta.get("source", {}).get("n_eh_gamma") or cfg.impact().n_pairs()
        g = qpdynamics.gamma_generation(ledger, n_eh, params)[e]
        origin = 0.0
    else:
        pulse = cfg.pulse()
        dt_bin = ledger.bin_width_ns * 1e-3
        g = qpdynamics.injection_generation(qpdynamics.response_function(ledger, params)[e], dt_bin, pulse)[0]
        origin = round(pulse.t_pulse_us / dt_bin) * dt_bin
    est = qpdynamics.TrappingRateFit(g, ledger.bin_width_ns * 1e-3, params.r_per_us)
    est.fit(data[:, 0] + origin, data[:, 1])
    result = {"electrode": ledger.electrode_labels[e], "s_per_us": est.s_, "rms_residual": est.residual_}
    if args.out:
        out = _outdir(args.out)
        with open(out / "fit_s.json", "w") as f:
            json.dump(result, f, indent=2, sort_keys=True)
        write_manifest(out, cfg, ["fit_s.json"], args.started, ledger=str(args.ledger))
    print(json.dumps(result))
    return 0


def cmd_parity(args, cfg: RunConfig):
    rng = np.random.SeedSequence(args.seed)
    seeds = rng.spawn(args.traces)
    traces = [parity.simulate_trace(args.gamma_p, args.fidelity, args.samples, args.dt_rep, s) for s in seeds]
    f, s = parity.parity_psd(traces)
    fit = parity.psd_and_fit(traces)
    out = _outdir(args.out)
    with open(out / "psd.csv", "w") as fh:
        fh.write("f_Hz,S_per_Hz\n")
        for a, b in zip(f, s):
            fh.write(f"{a:.6g},{b:.6e}\n")
    report = {"gamma_p_per_s": fit.gamma_p, "fidelity": fit.fidelity, "residual_norm": fit.residual_norm,
              "covariance": fit.covariance.tolist(), "true_gamma_p_per_s": args.gamma_p,
              "true_fidelity": args.fidelity, "n_traces": args.traces, "samples": args.samples,
              "dt_rep_s": args.dt_rep}
    with open(out / "fit.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    write_manifest(out, cfg, ["fit.json", "psd.csv"], args.started, seed=args.seed)
    log.info("fitted Gamma_p = %.4g /s, F = %.3f", fit.gamma_p, fit.fidelity)
    return 0


def cmd_caustics(args, cfg: RunConfig):
    db = cfg.materials()
    counts, edges = transport.caustic_map(db.substrate, args.phonons, args.seed, n_bins=args.bins,
                                          half_width=args.half_width)
    out = _outdir(args.out)
    mid = 0.5 * (edges[1:] + edges[:-1])
    with open(out / "caustics.csv", "w") as f:
        f.write("x_bin,y_bin,x_um,y_um,count\n")
        for i, x in enumerate(mid):
            for j, y in enumerate(mid):
                f.write(f"{i},{j},{x:.6g},{y:.6g},{counts[i, j]}\n")
    z = transport.fourfold_symmetry_zscore(counts)
    med = float(np.median(counts))
    ratio = float(counts.max() / med) if med > 0 else float("inf")
    write_manifest(out, cfg, ["caustics.csv"], args.started, seed=args.seed, n_phonons=args.phonons,
                   fourfold_max_z=z, max_over_median=ratio)
    log.info("fourfold max z %.2f, max/median %.2f", z, ratio)
    return 0


def cmd_geometry_check(args, cfg: RunConfig):
    geom = cfg.geometry()
    tcfg = cfg.transport()
    info = {"layout": geom.layout, "n_electrodes": len(geom.electrode_centers), "geometry_hash": geom.hash(),
            "extent_um": [geom.extent_x, geom.extent_y], "thickness_um": geom.thickness,
            "electrode_coverage": geom.electrode_coverage(), "island_coverage": geom.island_coverage(),
            "injector_position_um": list(geom.injector_position),
            "gamma_position_um": list(tcfg.gamma_position)}
    x, y, z = tcfg.gamma_position
    if not (abs(x) < geom.half_x and abs(y) < geom.half_y and 0 < z < geom.thickness):
        raise ConfigError([f"gamma/position_um: {list(tcfg.gamma_position)} is outside the substrate"])
    print(json.dumps(info, indent=2))
    return 0


# ---- parser ----

def build_parser():
    p = argparse.ArgumentParser(prog="qpoison", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help=f"JSON config path or bundled name (default ${CONFIG_ENV})")
        if seed:
            sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("materials", help="material parameter table"), seed=False)
    sp.add_argument("action", nargs="?", default="report", choices=["report"])
    sp.add_argument("--out", help="output directory (default: CSV to stdout)")
    sp.set_defaults(func=cmd_materials)

    sp = common(sub.add_parser("inject", help="phonon injection run"))
    sp.add_argument("--phonons", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_inject)

    sp = common(sub.add_parser("gamma", help="gamma impact run"))
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gamma)

    sp = common(sub.add_parser("footprint", help="x_qp maps and poisoning extent from a ledger"), seed=False)
    sp.add_argument("--ledger", required=True)
    sp.add_argument("--times", type=float, nargs="*", help="map snapshot times in us")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_footprint)

    sp = common(sub.add_parser("fit-s", help="fit the trapping rate to a measured trace"), seed=False)
    sp.add_argument("--trace", required=True, help="CSV with columns time_us,xqp")
    sp.add_argument("--ledger", required=True)
    sp.add_argument("--electrode", help="electrode label or index")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fit_s)

    sp = common(sub.add_parser("parity", help="synthetic parity traces and Lorentzian fit"))
    sp.add_argument("--gamma-p", type=float, default=0.6)
    sp.add_argument("--fidelity", type=float, default=0.8)
    sp.add_argument("--traces", type=int, default=50)
    sp.add_argument("--samples", type=int, default=20_000)
    sp.add_argument("--dt-rep", type=float, default=0.01)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_parity, seed=0)

    sp = common(sub.add_parser("caustics", help="point-source absorption map"))
    sp.add_argument("--phonons", type=int, default=1_000_000)
    sp.add_argument("--bins", type=int, default=42)
    sp.add_argument("--half-width", type=float, default=1050.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_caustics, seed=0)

    sp = common(sub.add_parser("geometry-check", help="validate a geometry and print a summary"), seed=False)
    sp.set_defaults(func=cmd_geometry_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    args.started = time.perf_counter()
    try:
        cfg = resolve_config(args.config)
        return args.func(args, cfg)
    except parity.FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (ConfigError, GeometryError, MaterialError, transport.TransportError,
            qpdynamics.DynamicsError, parity.ParityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
