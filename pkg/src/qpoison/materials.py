"""Material records and closed-form film/substrate quantities.

Units: lengths in um, times in ns, speeds in um/ns (= km/s), energies in
meV unless a field name or docstring says otherwise.  Gaps are stored in
ueV to match how they are usually quoted.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .units import AVOGADRO, HBAR_EV_S, HBAR_MEV_NS, J_PER_EV, KB_J_K, KB_MEV_K

WEIGHT_TOL = 1e-9


class MaterialError(ValueError):
    """Invalid material input."""


class DomainError(ValueError):
    """Input outside the domain where a formula applies."""


@dataclass(frozen=True)
class SubstrateParams:
    name: str
    mass_density: float            # g/cm^3
    v_transverse: float
    v_longitudinal: float
    dos_weight_T: float
    dos_weight_L: float
    C11: float                     # GPa
    C12: float
    C44: float
    isotope_rate_B: float          # s^3, rate = B nu^4
    anharmonic_rate_A: float       # s^4, rate = A nu^5
    bandgap: float = 1.17          # eV
    pair_energy: float = 3.6       # eV
    debye_frequency: float = 15.0  # THz
    charge_trap_length: float = 300.0

    def __post_init__(self):
        _check_weights(self.dos_weight_T, self.dos_weight_L)
        for key in ("mass_density", "v_transverse", "v_longitudinal", "isotope_rate_B",
                    "anharmonic_rate_A", "charge_trap_length", "debye_frequency"):
            if not getattr(self, key) > 0:
                raise MaterialError(f"substrate {key} must be positive")


@dataclass(frozen=True)
class SuperconductorParams:
    name: str
    mass_density: float
    v_T: float
    v_L: float
    v_s: float
    eta_T: float
    eta_L: float
    p_abs: float
    gap: float                        # ueV
    phonon_lifetime: float            # tau0_ph, ns
    gap_bulk: float | None = None
    gap_thickness_coeff: float = 0.0  # ueV nm
    qp_lifetime: float | None = None  # tau0_qp, ns
    cooper_pair_density: float | None = None  # um^-3
    normal_diffusion: float | None = None     # um^2/ns

    def __post_init__(self):
        for key in ("eta_T", "eta_L", "p_abs"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise MaterialError(f"{self.name}: {key}={v} outside [0, 1]")
        if not self.gap > 0:
            raise MaterialError(f"{self.name}: gap must be positive")
        if not self.phonon_lifetime > 0:
            raise MaterialError(f"{self.name}: phonon_lifetime must be positive")

    @property
    def delta(self):
        """Gap in meV."""
        return self.gap * 1e-3

    def with_gap(self, gap_ueV):
        return replace(self, gap=float(gap_ueV))


@dataclass(frozen=True)
class NormalMetalParams:
    name: str
    mass_density: float
    v_T: float
    v_L: float
    v_s: float
    eta_T: float
    eta_L: float
    p_abs: float
    coupling: float           # beta_L, dimensionless
    fermi_velocity: float     # um/ns
    fermi_energy: float       # eV
    dos_fermi: float          # J^-1 m^-3

    def __post_init__(self):
        for key in ("eta_T", "eta_L", "p_abs"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise MaterialError(f"{self.name}: {key}={v} outside [0, 1]")


@dataclass(frozen=True)
class TiLifetimeInputs:
    alpha2_av: float      # meV
    dos_fermi: float      # single-spin states / (eV atom)
    atomic_density: float  # atoms / cm^3 (only the ratio to dos_fermi matters)
    gap: float            # ueV

    def __post_init__(self):
        for key in ("alpha2_av", "dos_fermi", "atomic_density", "gap"):
            if not getattr(self, key) > 0:
                raise MaterialError(f"{key} must be positive")


@dataclass(frozen=True)
class MaterialDB:
    substrate: SubstrateParams
    superconductors: dict = field(default_factory=dict)
    normal_metals: dict = field(default_factory=dict)
    table_values: dict = field(default_factory=dict)
    lifetime_inputs: dict = field(default_factory=dict)

    def film(self, name):
        if name in self.superconductors:
            return self.superconductors[name]
        if name in self.normal_metals:
            return self.normal_metals[name]
        raise KeyError(f"unknown film material {name!r}")


def _check_weights(dos_T, dos_L):
    if dos_T < 0 or dos_L < 0 or abs(dos_T + dos_L - 1.0) > WEIGHT_TOL:
        raise MaterialError(f"DOS weights must be non-negative and sum to 1, got {dos_T}, {dos_L}")


def weighted_sound_speed(v_T, v_L, dos_T, dos_L):
    """Isotropic film sound speed, DOS-weighted over polarizations (um/ns)."""
    _check_weights(dos_T, dos_L)
    return dos_T * v_T + dos_L * v_L


def absorption_probability(eta_T, eta_L, dos_T, dos_L):
    """Probability that a substrate phonon enters the film."""
    for v in (eta_T, eta_L):
        if not 0.0 <= v <= 1.0:
            raise MaterialError(f"transmission {v} outside [0, 1]")
    _check_weights(dos_T, dos_L)
    return dos_T * eta_T + dos_L * eta_L


def fit_dos_weights(rows):
    """Least-squares transverse weight from ``(v_T, v_L, v_s)`` rows.

    With ``w_L = 1 - w_T`` each row gives ``v_s - v_L = w_T (v_T - v_L)``.
    """
    a = np.array([r[0] - r[1] for r in rows], dtype=float)
    b = np.array([r[2] - r[1] for r in rows], dtype=float)
    w_T = float(a @ b / (a @ a))
    return w_T, 1.0 - w_T


def debye_dos_weights(v_T, v_L, n_transverse=2):
    """Polarization weights from the Debye density of states (~ 1/v^3)."""
    t = n_transverse / v_T ** 3
    l = 1.0 / v_L ** 3
    return t / (t + l), l / (t + l)


def gap_vs_thickness(d_nm, gap_bulk=180.0, coeff=600.0):
    """Thin-film Al gap in ueV for thickness ``d_nm``."""
    d_nm = np.asarray(d_nm, dtype=float)
    if np.any(d_nm <= 0):
        raise MaterialError("film thickness must be positive")
    out = gap_bulk + coeff / d_nm
    return float(out) if out.ndim == 0 else out


def bilayer_gap(d1_nm, d2_nm, gap_bulk=180.0, coeff=600.0):
    """Mean of the two thickness-dependent gaps of a junction bilayer (ueV)."""
    return 0.5 * (gap_vs_thickness(d1_nm, gap_bulk, coeff) + gap_vs_thickness(d2_nm, gap_bulk, coeff))


def pair_breaking_rate(energy_meV, sc):
    """Linearized pair-breaking rate (1/ns) for a phonon of ``energy_meV``."""
    delta = sc.delta
    e = np.asarray(energy_meV, dtype=float)
    if np.any(e < 2 * delta):
        raise DomainError(f"phonon energy below 2*Delta={2 * delta:.4g} meV cannot break pairs")
    rate = (1.0 + 0.29 * (e / delta - 2.0)) / sc.phonon_lifetime
    return float(rate) if rate.ndim == 0 else rate


def pair_breaking_mfp(energy_meV, sc):
    return sc.v_s / pair_breaking_rate(energy_meV, sc)


def coupling_constant(fermi_energy_eV, dos_fermi, mass_density, v_L):
    """Dimensionless longitudinal electron-phonon coupling beta_L.

    ``dos_fermi`` in J^-1 m^-3, ``mass_density`` in g/cm^3, ``v_L`` in um/ns.
    """
    ef = fermi_energy_eV * J_PER_EV
    rho = mass_density * 1e3
    v = v_L * 1e3
    return (2.0 * ef / 3.0) ** 2 * dos_fermi / (2.0 * rho * v * v)


def normal_rate_coefficient(nm):
    """Gamma / omega for the normal metal (dimensionless)."""
    return math.pi * nm.coupling * nm.v_L / nm.fermi_velocity


def normal_phonon_rate(omega, nm):
    """Phonon-electron rate (1/ns) for angular frequency ``omega`` in rad/ns."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise DomainError("omega must be positive")
    rate = normal_rate_coefficient(nm) * omega
    return float(rate) if rate.ndim == 0 else rate


def normal_phonon_rate_from_energy(energy_meV, nm):
    return normal_phonon_rate(np.asarray(energy_meV) / HBAR_MEV_NS, nm)


def normal_mfp(energy_meV, nm):
    return nm.v_s / normal_phonon_rate_from_energy(energy_meV, nm)


def bcs_gap_ueV(tc_K):
    """Weak-coupling gap 1.76 k_B T_c in ueV."""
    return 1.76 * KB_MEV_K * tc_K * 1e3


def ti_phonon_lifetime(inputs):
    """tau0_ph = hbar N / (4 pi^2 N(0) <alpha^2> Delta), in ns."""
    # both densities are per atom, so N/N(0) is 1/dos_fermi in eV
    n_over_n0 = 1.0 / inputs.dos_fermi
    alpha2 = inputs.alpha2_av * 1e-3
    delta = inputs.gap * 1e-6
    tau_s = HBAR_EV_S * n_over_n0 / (4 * math.pi ** 2 * alpha2 * delta)
    return tau_s * 1e9


def bare_dos_per_atom(sommerfeld_mJ_mol_K2, lambda_mass):
    """Single-spin bare N(0) in states/(eV atom) from the Sommerfeld coefficient."""
    gamma = sommerfeld_mJ_mol_K2 * 1e-3
    both_spins_per_J = 3.0 * gamma / (math.pi ** 2 * KB_J_K ** 2 * AVOGADRO)
    return both_spins_per_J * J_PER_EV / 2.0 / (1.0 + lambda_mass)


def atomic_density(mass_density, molar_mass):
    """Atoms per cm^3."""
    return mass_density / molar_mass * AVOGADRO


def alpha2_from_lambda(lambda_mass, omega, F):
    """<alpha^2>_av (same unit as ``omega``) for a constant alpha^2.

    ``omega``/``F`` is a binned phonon density of states (bin centres,
    equal widths); its normalization cancels.
    """
    omega = np.asarray(omega, dtype=float)
    F = np.asarray(F, dtype=float)
    if omega.size == 0 or omega.shape != F.shape:
        raise MaterialError("F(omega) table must be non-empty and match omega")
    if np.any(omega <= 0) or np.any(F < 0) or not np.any(F > 0):
        raise MaterialError("F(omega) must have positive support")
    if not lambda_mass > 0:
        raise MaterialError("lambda must be positive")
    inv_moment = np.sum(F / omega)
    alpha2 = lambda_mass / (2.0 * inv_moment)
    return alpha2 * np.sum(F) / 3.0


def debye_dos(theta_D, n=200):
    """Debye F(omega) ~ omega^2 up to k_B theta_D, as (omega_meV, F)."""
    wmax = KB_MEV_K * theta_D
    edges = np.linspace(0, wmax, n + 1)
    w = 0.5 * (edges[1:] + edges[:-1])
    return w, w ** 2


def load_dos_table(name="ti_phonon_dos.csv"):
    text = resources.files("qpoison.data").joinpath(name).read_text()
    rows = [r for r in csv.reader(line for line in text.splitlines() if not line.startswith("#"))]
    body = np.array(rows[1:], dtype=float)
    return body[:, 0], body[:, 1]


def qp_diffusion_length(e_over_delta, sc):
    """sqrt(D(E)/Gamma_qp(E)) in um; ``e_over_delta`` is E_qp/Delta."""
    x = np.asarray(e_over_delta, dtype=float)
    if np.any(x <= 1.0):
        raise DomainError("E_qp must exceed Delta")
    if sc.normal_diffusion is None or sc.qp_lifetime is None:
        raise MaterialError(f"{sc.name}: diffusion constant and tau0_qp required")
    D = sc.normal_diffusion * np.sqrt(1.0 - 1.0 / x ** 2)
    rate = 1.8 / sc.qp_lifetime * (x - 1.0) ** 3
    out = np.sqrt(D / rate)
    return float(out) if out.ndim == 0 else out


def ti_lifetime_inputs(db=None, alpha2_av=None):
    """Bundled Ti inputs; ``alpha2_av`` defaults to the bundled value."""
    raw = (db or default_materials()).lifetime_inputs["Ti"]
    return TiLifetimeInputs(
        alpha2_av=raw["alpha2_av"] if alpha2_av is None else alpha2_av,
        dos_fermi=bare_dos_per_atom(raw["sommerfeld_mJ_mol_K2"], raw["lambda_mass"]),
        atomic_density=atomic_density(raw["mass_density"], raw["molar_mass"]),
        gap=bcs_gap_ueV(raw["critical_temperature"]),
    )


def ti_alpha2_from_table(db=None):
    raw = (db or default_materials()).lifetime_inputs["Ti"]
    w, F = load_dos_table(raw["dos_table"])
    return alpha2_from_lambda(raw["lambda_mass"], w, F)


def al_lifetime_check(db=None):
    """Al tau0_ph from the same formula with Debye F(omega) and Sommerfeld N(0)."""
    raw = (db or default_materials()).lifetime_inputs["Al"]
    w, F = debye_dos(raw["debye_temperature"])
    inputs = TiLifetimeInputs(
        alpha2_av=alpha2_from_lambda(raw["lambda_mass"], w, F),
        dos_fermi=bare_dos_per_atom(raw["sommerfeld_mJ_mol_K2"], raw["lambda_mass"]),
        atomic_density=atomic_density(raw["mass_density"], raw["molar_mass"]),
        gap=raw["gap"],
    )
    return ti_phonon_lifetime(inputs), inputs


def _read_json(path):
    if path is None:
        return json.loads(resources.files("qpoison.data").joinpath("materials.json").read_text())
    return json.loads(Path(path).read_text())


def load_materials(path=None, overrides=None):
    """Load the materials database; ``overrides`` maps name -> field dict."""
    raw = _read_json(path)
    overrides = overrides or {}
    w = raw["dos_weights"]
    dos_T, dos_L = float(w["transverse"]), float(w["longitudinal"])
    sub = dict(raw["substrate"])
    sub.update(overrides.get(sub["name"], {}))
    substrate = SubstrateParams(dos_weight_T=dos_T, dos_weight_L=dos_L, **sub)

    table = {}
    scs = {}
    for rec in raw["superconductors"]:
        rec = dict(rec)
        table[rec["name"]] = rec.pop("table", {})
        rec.update(overrides.get(rec["name"], {}))
        rec.setdefault("v_s", weighted_sound_speed(rec["v_T"], rec["v_L"], dos_T, dos_L))
        rec.setdefault("p_abs", absorption_probability(rec["eta_T"], rec["eta_L"], dos_T, dos_L))
        scs[rec["name"]] = SuperconductorParams(**rec)
    nms = {}
    for rec in raw["normal_metals"]:
        rec = dict(rec)
        table[rec["name"]] = rec.pop("table", {})
        rec.update(overrides.get(rec["name"], {}))
        rec.setdefault("v_s", weighted_sound_speed(rec["v_T"], rec["v_L"], dos_T, dos_L))
        rec.setdefault("p_abs", absorption_probability(rec["eta_T"], rec["eta_L"], dos_T, dos_L))
        rec.setdefault("coupling", coupling_constant(rec["fermi_energy"], rec["dos_fermi"],
                                                     rec["mass_density"], rec["v_L"]))
        nms[rec["name"]] = NormalMetalParams(**rec)
    return MaterialDB(substrate, scs, nms, table, raw.get("lifetime_inputs", {}))


_DEFAULT = None


def default_materials():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_materials()
    return _DEFAULT


REPORT_COLUMNS = ["material", "rho_g_cm3", "v_T_um_ns", "v_L_um_ns", "v_s_um_ns", "eta_T_prob", "eta_L_prob",
                  "p_abs_prob", "gap_ueV", "tau0_ph_ns"]


def table_rows(db=None):
    """Table-I-shaped rows (Al, Nb, Ti, Cu) computed from the database."""
    db = db or default_materials()
    rows = []
    for name in ("Al", "Nb", "Ti", "Cu"):
        m = db.film(name)
        is_sc = isinstance(m, SuperconductorParams)
        if name == "Ti":
            tau = ti_phonon_lifetime(ti_lifetime_inputs(db))
        elif is_sc:
            tau = m.phonon_lifetime
        else:
            tau = 1.0 / normal_phonon_rate_from_energy(2 * db.superconductors["Al"].delta, m)
        rows.append({
            "material": name,
            "rho_g_cm3": m.mass_density,
            "v_T_um_ns": m.v_T,
            "v_L_um_ns": m.v_L,
            "v_s_um_ns": round(m.v_s, 4),
            "eta_T_prob": m.eta_T,
            "eta_L_prob": m.eta_L,
            "p_abs_prob": round(m.p_abs, 4),
            "gap_ueV": round(m.gap, 2) if is_sc else "",
            "tau0_ph_ns": round(tau, 5),
        })
    return rows


def write_report(stream, db=None):
    writer = csv.DictWriter(stream, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in table_rows(db):
        writer.writerow(row)
