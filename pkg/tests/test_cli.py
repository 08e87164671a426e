import csv
import io
import json
import re

import numpy as np
import pytest

from qpoison import cli, transport as tr

UNIT = re.compile(r".*_(um|ns|us|s|Hz|per_Hz|per_s|per_us|meV|ueV|g_cm3|um_ns|prob|ratio|count|bin)$")
LABELS = {"electrode_id", "label", "material", "N_qp"}


def _headers_have_units(path):
    header = path.read_text().splitlines()[0].split(",")
    return all(h in LABELS or UNIT.match(h) for h in header), header


@pytest.fixture(scope="module")
def inject_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("inject")
    args = ["inject", "--config", "inject-nonmetal", "--phonons", "20000", "--seed", "4"]
    assert cli.main(args + ["--out", str(base / "a")]) == 0
    assert cli.main(args + ["--out", str(base / "b"), "--workers", "2"]) == 0
    return base / "a", base / "b"


def test_materials_report_columns(capsys):
    assert cli.main(["materials", "report"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert {r["material"] for r in rows} >= {"Al", "Nb", "Ti", "Cu"}
    assert {"v_s_um_ns", "p_abs_prob", "gap_ueV", "tau0_ph_ns"} <= set(rows[0])


def test_materials_report_to_directory(tmp_path):
    assert cli.main(["materials", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json", "materials.csv"]


def test_invalid_pairs_exit_code_and_no_output(tmp_path, capsys):
    out = tmp_path / "g"
    assert cli.main(["gamma", "--config", "gamma-cu10", "--pairs", "0", "--out", str(out)]) == 2
    assert not out.exists()
    assert "n_particles" in capsys.readouterr().err


def test_unknown_config_exit_code(tmp_path):
    assert cli.main(["inject", "--config", "nope", "--out", str(tmp_path / "x")]) == 2


def test_rerun_is_byte_identical(inject_dirs):
    a, b = inject_dirs
    names = sorted(p.name for p in a.iterdir() if p.suffix == ".csv")
    assert names == ["electrodes.csv", "ledger.csv", "xqp.csv"]
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()


def test_one_manifest_per_directory(inject_dirs):
    for d in inject_dirs:
        assert len(list(d.glob("manifest*"))) == 1
        man = json.loads((d / "manifest.json").read_text())
        assert {"config_hash", "versions", "wall_clock_s", "outputs"} <= set(man)
        assert man["totals"]["energy_audit_rel"] == 0.0


def test_inject_headers_carry_units(inject_dirs):
    for p in inject_dirs[0].glob("*.csv"):
        ok, header = _headers_have_units(p)
        assert ok, header


def test_footprint_from_gamma_ledger(tmp_path):
    g = tmp_path / "g"
    assert cli.main(["gamma", "--config", "gamma-nonmetal", "--pairs", "200", "--out", str(g)]) == 0
    f = tmp_path / "f"
    assert cli.main(["footprint", "--config", "gamma-nonmetal", "--ledger", str(g), "--out", str(f),
                     "--times", "1", "10"]) == 0
    man = json.loads((f / "manifest.json").read_text())
    assert man["max_extent_um"] >= 0
    for name in ("extent.csv", "xqp_map.csv"):
        ok, header = _headers_have_units(f / name)
        assert ok, header


def test_fit_s_recovers_trapping_rate(tmp_path, inject_dirs, capsys):
    a = inject_dirs[0]
    rows = np.loadtxt(a / "xqp.csv", delimiter=",", skiprows=1, usecols=(0, 2, 3))
    sel = rows[:, 0] == 3
    trace = tmp_path / "trace.csv"
    np.savetxt(trace, rows[sel][:, 1:], delimiter=",", header="time_us,xqp", comments="")
    code = cli.main(["fit-s", "--config", "inject-nonmetal", "--trace", str(trace), "--ledger", str(a),
                     "--electrode", "Q4"])
    assert code == 0
    res = json.loads(capsys.readouterr().out)
    assert res["s_per_us"] == pytest.approx(0.045, abs=2e-3)


def test_fit_s_unknown_electrode(tmp_path, inject_dirs):
    trace = tmp_path / "t.csv"
    trace.write_text("time_us,xqp\n0,0\n1,0\n")
    assert cli.main(["fit-s", "--trace", str(trace), "--ledger", str(inject_dirs[0]), "--electrode", "Q9"]) == 2


def test_parity_command(tmp_path):
    out = tmp_path / "p"
    assert cli.main(["parity", "--traces", "20", "--seed", "3", "--out", str(out)]) == 0
    fit = json.loads((out / "fit.json").read_text())
    assert fit["gamma_p_per_s"] == pytest.approx(0.6, rel=0.2)
    ok, header = _headers_have_units(out / "psd.csv")
    assert ok, header


def test_caustics_command(tmp_path):
    out = tmp_path / "c"
    assert cli.main(["caustics", "--phonons", "20000", "--bins", "20", "--out", str(out)]) == 0
    data = np.loadtxt(out / "caustics.csv", delimiter=",", skiprows=1)
    assert data.shape == (400, 5)
    assert data[:, 4].sum() > 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["n_phonons"] == 20000


def test_geometry_check(capsys):
    assert cli.main(["geometry-check", "--config", "gamma-cu10"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n_electrodes"] == 39 * 39
    assert info["layout"] == "dense-grid"


def test_geometry_check_rejects_outside_source(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"gamma": {"position_um": [0.0, 0.0, 1e4]}}))
    assert cli.main(["geometry-check", "--config", str(p)]) == 2


def test_ledger_written_by_cli_reads_back(inject_dirs):
    a, _ = inject_dirs
    led = tr.read_ledger(a)
    assert led.n_source == 20000
    assert led.energy_audit() == 0.0
