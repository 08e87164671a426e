"""Monte Carlo phonon transport through the chip and the per-electrode deposit ledger.

Each source particle (an injector phonon or a gamma e-/h+ pair) is traced
to completion with its own random stream, seeded from ``(seed, index)``.
All tallies are integers (QP counts and energy quanta), so the merged
ledger is bit-identical whatever the chunking or the number of workers.
"""
from __future__ import annotations

import json
import math
import time as _time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from numba import njit

from . import crystal
from .cascade import (FILM_SC, P_ABS, P_GAP, P_KIND, QUANTUM, STACK_SIZE, FilmSpec, entry_survives,
                      film_cascade_q, to_quanta)
from .geometry import (FACE_BOTTOM, FACE_TOP, FACE_XHI, FACE_XLO, FACE_YLO, ChipGeometry, _electrode_at,
                       _island_at, hit_point, ray_box_s)
from .materials import MaterialDB, bilayer_gap, default_materials
from .rng import seed_state, uniform, uniform_open
from .units import H_MEV_S

# energy categories
E_SOURCE, E_ELECTRODE, E_GROUNDPLANE, E_ISLAND, E_WALL, E_DROPPED, E_RESIDUAL, E_CHARGE_BOUNDARY = range(8)
ENERGY_NAMES = ("source", "electrode", "groundplane", "island", "wall_escape", "dropped", "residual",
                "charge_boundary")
# event counters
C_WALL_ESCAPES, C_BOUNDARY, C_CASCADES, C_ISOTOPE, C_ANHARMONIC, C_PHONONS, C_QP, C_EVENT_CAP = range(8)
COUNTER_NAMES = ("wall_escapes", "boundary_events", "cascades", "isotope_scatters", "anharmonic_decays",
                 "phonons_created", "qp_total", "event_cap_reached")

SRC_INJECTOR = 0
SRC_GAMMA = 1

# float parameter vector
(K_HX, K_HY, K_THICK, K_PWALL, K_DT, K_TMAX, K_KILL, K_THR, K_B, K_A, K_BULK, K_ANISO, K_KERNEL,
 K_PLTT, K_VT, K_VL, K_GP, K_MAXEV, K_SX, K_SY, K_SZ, K_SRC_E, K_TRAP, K_KIN, K_REC, K_DEBYE,
 K_SRCKIND) = range(27)
N_PARAMS = 27

FILM_ELECTRODE, FILM_GROUNDPLANE, FILM_ISLAND = range(3)
PHONON_STACK = 1 << 16
MAX_REFLECT_TRIES = 64


class TransportError(ValueError):
    pass


@dataclass
class TransportConfig:
    n_particles: int = 10000
    seed: int = 0
    bin_width_ns: float = 1000.0
    t_max_ns: float = 1.0e6
    anisotropic: bool = False
    kill_subthreshold: bool = True
    kill_threshold_meV: float | None = None     # default 2*Delta_junc
    bulk_scattering: bool = True
    anharmonic_kernel: str = "standard"
    p_ltt: float = 0.75
    crystal_rotation_deg: float = 45.0
    table_n_mu: int = 256
    table_n_phi: int = 512
    workers: int = 1
    chunk_size: int = 2048
    max_boundary_events: int = 0
    junction_gap_ueV: float | None = None       # default: 40/80 nm bilayer average
    injector_energy_meV: float | None = None    # default 2*Delta_junc
    gamma_position: tuple = (0.0, 0.0, 262.5)
    gamma_energy_keV: float = 100.0

    def validate(self):
        if self.n_particles <= 0:
            raise TransportError("n_particles must be positive")
        if not self.bin_width_ns > 0 or not self.t_max_ns >= self.bin_width_ns:
            raise TransportError("need 0 < bin_width_ns <= t_max_ns")
        if self.anharmonic_kernel not in ("standard", "uniform"):
            raise TransportError("anharmonic_kernel must be 'standard' or 'uniform'")
        if not 0.0 <= self.p_ltt <= 1.0:
            raise TransportError("p_ltt must lie in [0, 1]")
        if self.workers < 1 or self.chunk_size < 1:
            raise TransportError("workers and chunk_size must be >= 1")

    @property
    def n_bins(self):
        return int(math.ceil(self.t_max_ns / self.bin_width_ns - 1e-9))


@dataclass
class GammaImpact:
    position: tuple = (0.0, 0.0, 262.5)
    deposit_energy_keV: float = 100.0

    def n_pairs(self, pair_energy_eV=3.6):
        # integer arithmetic in meV avoids 100000/3.6 landing a hair below an integer
        return int(round(self.deposit_energy_keV * 1e6)) // int(round(pair_energy_eV * 1e3))


def n_eh_gamma(deposit_keV=100.0, pair_energy_eV=3.6):
    return GammaImpact(deposit_energy_keV=deposit_keV).n_pairs(pair_energy_eV)


@dataclass
class DepositLedger:
    counts: np.ndarray                 # (n_electrodes, n_bins) QPs created
    bin_width_ns: float
    energy_q: np.ndarray               # int64 per ENERGY_NAMES, in QUANTUM meV
    counters: np.ndarray               # int64 per COUNTER_NAMES
    n_source: int
    source_kind: str
    geometry_hash: str
    electrode_labels: tuple = ()
    electrode_centers: np.ndarray = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_bins(self):
        return self.counts.shape[1]

    @property
    def times_ns(self):
        return np.arange(self.n_bins) * self.bin_width_ns

    def energy(self, name):
        return self.energy_q[ENERGY_NAMES.index(name)] * QUANTUM

    def energy_audit(self):
        """Relative mismatch between source energy and all sinks."""
        src = int(self.energy_q[E_SOURCE])
        sinks = int(self.energy_q[1:].sum())
        return abs(src - sinks) / max(src, 1)

    def empty_like(self):
        return DepositLedger(np.zeros_like(self.counts), self.bin_width_ns, np.zeros_like(self.energy_q),
                             np.zeros_like(self.counters), 0, self.source_kind, self.geometry_hash,
                             self.electrode_labels, self.electrode_centers, self.seed, dict(self.meta))

    def totals(self):
        d = {f"energy_{k}_meV": float(v * QUANTUM) for k, v in zip(ENERGY_NAMES, self.energy_q)}
        d.update({k: int(v) for k, v in zip(COUNTER_NAMES, self.counters)})
        d["n_source"] = int(self.n_source)
        d["energy_audit_rel"] = self.energy_audit()
        src = self.energy_q[E_SOURCE]
        d["escape_fraction"] = float(self.energy_q[E_WALL] / src) if src else 0.0
        return d

    def identical(self, other):
        return (np.array_equal(self.counts, other.counts) and np.array_equal(self.energy_q, other.energy_q)
                and np.array_equal(self.counters, other.counters) and self.n_source == other.n_source)


def merge(*ledgers):
    """Elementwise sum of ledgers with identical binning and geometry."""
    if not ledgers:
        raise TransportError("nothing to merge")
    first = ledgers[0]
    out = first.empty_like()
    for led in ledgers:
        if (led.counts.shape != first.counts.shape or led.bin_width_ns != first.bin_width_ns
                or led.geometry_hash != first.geometry_hash):
            raise TransportError("ledgers differ in binning or geometry")
        out.counts += led.counts
        out.energy_q += led.energy_q
        out.counters += led.counters
        out.n_source += led.n_source
    return out


# ---- kernel helpers ----
# The hot loop keeps phonon state in scalars; passing arrays into helper
# functions costs reference-count traffic on every boundary event.

@njit(inline="always", error_model="numpy", cache=True)
def _table_velocity(table, branch, kx, ky, kz):
    """Bilinear interpolation of the group velocity table at direction k."""
    n_mu = table.shape[1]
    n_phi = table.shape[2]
    fm = (min(max(kz, -1.0), 1.0) + 1.0) * 0.5 * (n_mu - 1)
    i0 = int(fm)
    if i0 >= n_mu - 1:
        i0 = n_mu - 2
    wm = fm - i0
    phi = math.atan2(ky, kx)
    if phi < 0.0:
        phi += 2.0 * math.pi
    fp = phi / (2.0 * math.pi) * n_phi
    j0 = int(fp)
    wp = fp - j0
    j0 = j0 % n_phi
    j1 = (j0 + 1) % n_phi
    w00 = (1 - wm) * (1 - wp)
    w01 = (1 - wm) * wp
    w10 = wm * (1 - wp)
    w11 = wm * wp
    vx = (w00 * table[branch, i0, j0, 0] + w01 * table[branch, i0, j1, 0]
          + w10 * table[branch, i0 + 1, j0, 0] + w11 * table[branch, i0 + 1, j1, 0])
    vy = (w00 * table[branch, i0, j0, 1] + w01 * table[branch, i0, j1, 1]
          + w10 * table[branch, i0 + 1, j0, 1] + w11 * table[branch, i0 + 1, j1, 1])
    vz = (w00 * table[branch, i0, j0, 2] + w01 * table[branch, i0, j1, 2]
          + w10 * table[branch, i0 + 1, j0, 2] + w11 * table[branch, i0 + 1, j1, 2])
    return vx, vy, vz


@njit(inline="always", error_model="numpy", cache=True)
def _lambert_face(s, face):
    """Cosine-weighted direction pointing into the substrate from ``face``."""
    ct = math.sqrt(uniform(s))
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    c, sn = crystal.unit_circle(s)
    a = st * c
    b = st * sn
    if face == FACE_BOTTOM:
        return a, b, ct
    if face == FACE_TOP:
        return a, b, -ct
    if face == FACE_XLO:
        return ct, a, b
    if face == FACE_XHI:
        return -ct, a, b
    if face == FACE_YLO:
        return a, ct, b
    return a, -ct, b


@njit(inline="always", error_model="numpy", cache=True)
def _inward_component(face, vx, vy, vz):
    if face == FACE_BOTTOM:
        return vz
    if face == FACE_TOP:
        return -vz
    if face == FACE_XLO:
        return vx
    if face == FACE_XHI:
        return -vx
    if face == FACE_YLO:
        return vy
    return -vy


@njit(error_model="numpy", cache=True)
def _diffuse_aniso(s, table, branch, face):
    """Diffuse direction whose group velocity also points into the substrate."""
    for _ in range(MAX_REFLECT_TRIES):
        kx, ky, kz = _lambert_face(s, face)
        vx, vy, vz = _table_velocity(table, branch, kx, ky, kz)
        if _inward_component(face, vx, vy, vz) > 0.0:
            return kx, ky, kz
    # along a face normal the group velocity of Si points inward
    return _lambert_face_normal(face)


@njit(inline="always", error_model="numpy", cache=True)
def _lambert_face_normal(face):
    if face == FACE_BOTTOM:
        return 0.0, 0.0, 1.0
    if face == FACE_TOP:
        return 0.0, 0.0, -1.0
    if face == FACE_XLO:
        return 1.0, 0.0, 0.0
    if face == FACE_XHI:
        return -1.0, 0.0, 0.0
    if face == FACE_YLO:
        return 0.0, 1.0, 0.0
    return 0.0, -1.0, 0.0


@njit(error_model="numpy", cache=True)
def _transverse_branch(s, cum_w):
    # pick ST or FT with their relative transverse weights
    u = uniform(s) * cum_w[1]
    return 0 if u < cum_w[0] else 1


@njit(inline="always", error_model="numpy", cache=True)
def _charge_stop(s, trap_length):
    return -trap_length * math.log(uniform_open(s))


@njit(error_model="numpy", cache=True)
def _charge_stop_batch(seed, trap_length, out):
    s = np.empty(4, dtype=np.uint64)
    seed_state(s, seed, 0)
    for i in range(out.shape[0]):
        out[i] = _charge_stop(s, trap_length)


def sample_charge_stops(n, seed=0, trap_length=300.0):
    """Unbounded stopping distances (um) drawn exactly as in the gamma source."""
    out = np.empty(int(n))
    _charge_stop_batch(np.uint64(seed), float(trap_length), out)
    return out


@njit(error_model="numpy", cache=True)
def _seed_charge(s, params, stack_f, stack_i, top, kin_q, cum_w, energy, counters):
    """Trace one charge in a straight line and emit its phonons; returns the new stack top."""
    hx, hy, th = params[K_HX], params[K_HY], params[K_THICK]
    px, py, pz = params[K_SX], params[K_SY], params[K_SZ]
    kx, ky, kz = crystal.sphere(s)
    lb, _ = ray_box_s(px, py, pz, kx, ky, kz, hx, hy, th)
    lstop = _charge_stop(s, params[K_TRAP])
    absorbed = lstop >= lb
    ltrack = lb if absorbed else lstop
    lpin = ltrack * (1.0 - 1e-9)
    debye_q = np.int64(params[K_DEBYE])
    rec_q = np.int64(params[K_REC])
    # kinetic energy: Debye phonons spread uniformly over the nominal stopping
    # track; the part beyond an absorbing boundary is released at the boundary
    remaining = kin_q
    while remaining > 0:
        e = debye_q if remaining >= debye_q else remaining
        remaining -= e
        d = min(lstop * uniform(s), lpin)
        dx, dy, dz = crystal.sphere(s)
        stack_f[top, 0] = px + kx * d
        stack_f[top, 1] = py + ky * d
        stack_f[top, 2] = pz + kz * d
        stack_f[top, 3] = dx
        stack_f[top, 4] = dy
        stack_f[top, 5] = dz
        stack_f[top, 6] = 0.0
        stack_i[top, 0] = crystal.sample_branch(s, cum_w)
        stack_i[top, 1] = e
        top += 1
        counters[C_PHONONS] += 1
    if absorbed:
        energy[E_CHARGE_BOUNDARY] += rec_q
        return top
    remaining = rec_q
    while remaining > 0:
        e = debye_q if remaining >= debye_q else remaining
        remaining -= e
        dx, dy, dz = crystal.sphere(s)
        stack_f[top, 0] = px + kx * lpin
        stack_f[top, 1] = py + ky * lpin
        stack_f[top, 2] = pz + kz * lpin
        stack_f[top, 3] = dx
        stack_f[top, 4] = dy
        stack_f[top, 5] = dz
        stack_f[top, 6] = 0.0
        stack_i[top, 0] = crystal.sample_branch(s, cum_w)
        stack_i[top, 1] = e
        top += 1
        counters[C_PHONONS] += 1
    return top


@njit(error_model="numpy", cache=True)
def run_particles(first, last, seed, params, films, cum_w, speeds, table, box_tables_f, centers,
                  cell0, cell_n, cell_start, cell_items, island, hist, energy, counters):
    """Trace source particles ``first..last-1`` into the tallies."""
    s = np.empty(4, dtype=np.uint64)
    stack_f = np.empty((PHONON_STACK, 7))
    stack_i = np.empty((PHONON_STACK, 2), dtype=np.int64)
    returned = np.empty(STACK_SIZE, dtype=np.int64)
    casc_ph = np.empty(STACK_SIZE, dtype=np.int64)
    casc_qp = np.empty(STACK_SIZE, dtype=np.int64)
    hx, hy, th = params[K_HX], params[K_HY], params[K_THICK]
    p_wall = params[K_PWALL]
    half_patch = box_tables_f[0]
    dt_bin = params[K_DT]
    tmax = params[K_TMAX]
    n_bins = hist.shape[1]
    kill = params[K_KILL] != 0.0
    thr = np.int64(params[K_THR])
    bulk = params[K_BULK] != 0.0
    aniso = params[K_ANISO] != 0.0
    b_ns = params[K_B] * 1e-9
    a_ns = params[K_A] * 1e-9
    kernel = int(params[K_KERNEL])
    p_ltt = params[K_PLTT]
    v_t = params[K_VT]
    v_l = params[K_VL]
    max_ev = np.int64(params[K_MAXEV])
    islands_on = island[0] != 0.0
    isl_x0, isl_y0, isl_pitch, isl_gap = island[1], island[2], island[3], island[4]
    gp_on = params[K_GP] != 0.0
    hz_per_q = QUANTUM / H_MEV_S
    src_kind = int(params[K_SRCKIND])
    for idx in range(first, last):
        seed_state(s, seed, idx)
        top = 0
        if src_kind == SRC_INJECTOR:
            e0 = np.int64(params[K_SRC_E])
            kx, ky, kz = crystal.sphere(s)
            stack_f[0, 0] = params[K_SX]
            stack_f[0, 1] = params[K_SY]
            stack_f[0, 2] = params[K_SZ]
            stack_f[0, 3] = kx
            stack_f[0, 4] = ky
            stack_f[0, 5] = -abs(kz)
            stack_f[0, 6] = 0.0
            stack_i[0, 0] = crystal.sample_branch(s, cum_w)
            stack_i[0, 1] = e0
            top = 1
            energy[E_SOURCE] += e0
            counters[C_PHONONS] += 1
        else:
            kin = np.int64(params[K_KIN])
            rec = np.int64(params[K_REC])
            energy[E_SOURCE] += kin + 2 * rec
            ke = np.int64(uniform(s) * kin)
            top = _seed_charge(s, params, stack_f, stack_i, top, ke, cum_w, energy, counters)
            top = _seed_charge(s, params, stack_f, stack_i, top, kin - ke, cum_w, energy, counters)
        while top > 0:
            top -= 1
            px = stack_f[top, 0]
            py = stack_f[top, 1]
            pz = stack_f[top, 2]
            kx = stack_f[top, 3]
            ky = stack_f[top, 4]
            kz = stack_f[top, 5]
            t = stack_f[top, 6]
            branch = stack_i[top, 0]
            e = stack_i[top, 1]
            n_ev = 0
            while True:
                if kill and e < thr:
                    energy[E_DROPPED] += e
                    break
                if aniso:
                    vx, vy, vz = _table_velocity(table, branch, kx, ky, kz)
                else:
                    sp = speeds[branch]
                    vx = sp * kx
                    vy = sp * ky
                    vz = sp * kz
                t_hit, face = ray_box_s(px, py, pz, vx, vy, vz, hx, hy, th)
                t_sc = np.inf
                r_iso = 0.0
                r_tot = 0.0
                if bulk:
                    nu = e * hz_per_q
                    nu2 = nu * nu
                    r_iso = b_ns * nu2 * nu2
                    r_tot = r_iso
                    if branch == 2:
                        r_tot += a_ns * nu2 * nu2 * nu
                    if r_tot * t_hit > 1e-12:
                        t_sc = -math.log(uniform_open(s)) / r_tot
                if t_sc < t_hit:
                    if t + t_sc > tmax:
                        energy[E_RESIDUAL] += e
                        break
                    t += t_sc
                    px += vx * t_sc
                    py += vy * t_sc
                    pz += vz * t_sc
                    if uniform(s) * r_tot < r_iso:
                        counters[C_ISOTOPE] += 1
                        kx, ky, kz = crystal.sphere(s)
                        branch = crystal.sample_branch(s, cum_w)
                    else:
                        counters[C_ANHARMONIC] += 1
                        x, chan = crystal.sample_anharmonic(s, kernel, p_ltt, v_t, v_l)
                        e1 = np.int64(x * e)
                        e2 = e - e1
                        b1 = _transverse_branch(s, cum_w) if chan == crystal.DECAY_LTT else 2
                        dx, dy, dz = crystal.sphere(s)
                        stack_f[top, 0] = px
                        stack_f[top, 1] = py
                        stack_f[top, 2] = pz
                        stack_f[top, 3] = dx
                        stack_f[top, 4] = dy
                        stack_f[top, 5] = dz
                        stack_f[top, 6] = t
                        stack_i[top, 0] = _transverse_branch(s, cum_w)
                        stack_i[top, 1] = e2
                        top += 1
                        counters[C_PHONONS] += 1
                        if top >= PHONON_STACK - 1:
                            raise RuntimeError("phonon stack overflow")
                        kx, ky, kz = crystal.sphere(s)
                        branch = b1
                        e = e1
                    continue
                if t + t_hit > tmax:
                    energy[E_RESIDUAL] += e
                    break
                t += t_hit
                px, py, pz = hit_point(px, py, pz, vx, vy, vz, t_hit, face, hx, hy, th)
                counters[C_BOUNDARY] += 1
                n_ev += 1
                if max_ev > 0 and n_ev >= max_ev:
                    counters[C_EVENT_CAP] += 1
                    energy[E_RESIDUAL] += e
                    break
                film = -1
                elec = -1
                if face == FACE_TOP:
                    elec = _electrode_at(px, py, cell0, cell_n, cell_start, cell_items, centers, half_patch)
                    if elec >= 0:
                        film = FILM_ELECTRODE
                    elif gp_on:
                        film = FILM_GROUNDPLANE
                elif face == FACE_BOTTOM:
                    if islands_on and _island_at(px, py, isl_x0, isl_y0, isl_pitch, isl_gap):
                        film = FILM_ISLAND
                elif uniform(s) < p_wall:
                    energy[E_WALL] += e
                    counters[C_WALL_ESCAPES] += 1
                    break
                if film >= 0 and uniform(s) < films[film, P_ABS]:
                    blocked = films[film, P_KIND] == FILM_SC and e < 2 * np.int64(films[film, P_GAP])
                    if not blocked:
                        fp = films[film]
                        if not entry_survives(s, fp, e):
                            nq, dep, nr = film_cascade_q(s, fp, e, returned, casc_ph, casc_qp)
                            counters[C_CASCADES] += 1
                            if film == FILM_ELECTRODE:
                                energy[E_ELECTRODE] += dep
                                b = int(t / dt_bin)
                                if b >= n_bins:
                                    b = n_bins - 1
                                hist[elec, b] += nq
                                counters[C_QP] += nq
                            elif film == FILM_GROUNDPLANE:
                                energy[E_GROUNDPLANE] += dep
                            else:
                                energy[E_ISLAND] += dep
                            for j in range(nr):
                                br = crystal.sample_branch(s, cum_w)
                                if aniso:
                                    dx, dy, dz = _diffuse_aniso(s, table, br, face)
                                else:
                                    dx, dy, dz = _lambert_face(s, face)
                                stack_f[top, 0] = px
                                stack_f[top, 1] = py
                                stack_f[top, 2] = pz
                                stack_f[top, 3] = dx
                                stack_f[top, 4] = dy
                                stack_f[top, 5] = dz
                                stack_f[top, 6] = t
                                stack_i[top, 0] = br
                                stack_i[top, 1] = returned[j]
                                top += 1
                                counters[C_PHONONS] += 1
                                if top >= PHONON_STACK - 1:
                                    raise RuntimeError("phonon stack overflow")
                            break
                if aniso:
                    kx, ky, kz = _diffuse_aniso(s, table, branch, face)
                else:
                    kx, ky, kz = _lambert_face(s, face)


# ---- python orchestration ----

@dataclass
class PreparedRun:
    params: np.ndarray
    films: np.ndarray
    cum_w: np.ndarray
    speeds: np.ndarray
    table: np.ndarray
    geo: tuple
    n_electrodes: int
    n_bins: int
    seed: int
    n_particles: int
    chunk_size: int

    def kernel_args(self):
        return (self.params, self.films, self.cum_w, self.speeds, self.table) + self.geo


_TABLE_CACHE = {}


def velocity_table(substrate, config):
    key = (substrate, config.crystal_rotation_deg, config.table_n_mu, config.table_n_phi)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = crystal.build_velocity_table(substrate, config.crystal_rotation_deg,
                                                         config.table_n_mu, config.table_n_phi)
    return _TABLE_CACHE[key]


def junction_gap_ueV(config):
    return bilayer_gap(40.0, 80.0) if config.junction_gap_ueV is None else config.junction_gap_ueV


def build_films(geom: ChipGeometry, db: MaterialDB, config: TransportConfig):
    """Film parameter rows for the electrode, ground plane, and islands."""
    gap_j = junction_gap_ueV(config)
    threshold = config.kill_threshold_meV if config.kill_threshold_meV is not None else 2 * gap_j * 1e-3
    al = db.superconductors["Al"]
    rows = [FilmSpec.superconductor(al, geom.electrode_thickness * 1e-3, gap_ueV=gap_j)]
    gp_name = geom.groundplane_material or "Nb"
    rows.append(FilmSpec.superconductor(db.superconductors[gp_name], geom.groundplane_thickness * 1e-3))
    if geom.islands_enabled:
        mat = db.film(geom.island_material)
        if geom.island_material in db.normal_metals:
            rows.append(FilmSpec.normal_metal(mat, geom.island_thickness, 2 * gap_j * 1e-3))
        else:
            rows.append(FilmSpec.superconductor(mat, geom.island_thickness))
    else:
        rows.append(rows[0])
    return rows, threshold


def prepare(kind, geom: ChipGeometry, config: TransportConfig, db: MaterialDB | None = None,
            source_position=None, source_energy_meV=None):
    config.validate()
    db = db or default_materials()
    sub = db.substrate
    films, threshold = build_films(geom, db, config)
    tab = velocity_table(sub, config)
    w = crystal.branch_weights(tab, sub.dos_weight_T, sub.dos_weight_L)
    cum_w = np.cumsum(w)
    cum_w[-1] = 1.0
    p = np.zeros(N_PARAMS)
    p[K_HX], p[K_HY], p[K_THICK] = geom.half_x, geom.half_y, geom.thickness
    p[K_PWALL] = geom.wall_escape_probability
    p[K_DT] = config.bin_width_ns
    p[K_TMAX] = config.n_bins * config.bin_width_ns
    p[K_KILL] = 1.0 if config.kill_subthreshold else 0.0
    p[K_THR] = float(to_quanta(threshold))
    p[K_B], p[K_A] = sub.isotope_rate_B, sub.anharmonic_rate_A
    p[K_BULK] = 1.0 if config.bulk_scattering else 0.0
    p[K_ANISO] = 1.0 if config.anisotropic else 0.0
    p[K_KERNEL] = crystal.KERNEL_STANDARD if config.anharmonic_kernel == "standard" else crystal.KERNEL_UNIFORM
    p[K_PLTT] = config.p_ltt
    p[K_VT], p[K_VL] = sub.v_transverse, sub.v_longitudinal
    p[K_GP] = 1.0 if geom.groundplane_material else 0.0
    p[K_MAXEV] = config.max_boundary_events
    x, y, z = source_position
    if not (abs(x) < geom.half_x and abs(y) < geom.half_y and 0.0 < z < geom.thickness):
        raise TransportError(f"source position {source_position} is not inside the chip")
    p[K_SX], p[K_SY], p[K_SZ] = x, y, z
    p[K_SRC_E] = float(to_quanta(source_energy_meV or 0.0))
    p[K_TRAP] = sub.charge_trap_length
    p[K_KIN] = float(to_quanta((sub.pair_energy - sub.bandgap) * 1e3))
    p[K_REC] = float(to_quanta(0.5 * sub.bandgap * 1e3))
    p[K_DEBYE] = float(to_quanta(sub.debye_frequency * 1e12 * H_MEV_S))
    p[K_SRCKIND] = kind
    t = geom.tables()
    geo = (np.array([t.half_patch]), t.centers if len(t.centers) else np.zeros((0, 2)), t.cell0, t.cell_n,
           t.cell_start, t.cell_items if len(t.cell_items) else np.zeros(0, dtype=np.int64), t.island)
    table = tab.vg if config.anisotropic else np.zeros((3, 2, 2, 3))
    return PreparedRun(p, np.array([f.params() for f in films]), cum_w, tab.mean_speed.copy(),
                       np.ascontiguousarray(table), geo, len(geom.electrode_centers), config.n_bins,
                       int(config.seed), int(config.n_particles), int(config.chunk_size))


def _run_chunk(prep: PreparedRun, first, last):
    hist = np.zeros((max(prep.n_electrodes, 1), prep.n_bins), dtype=np.int64)
    energy = np.zeros(len(ENERGY_NAMES), dtype=np.int64)
    counters = np.zeros(len(COUNTER_NAMES), dtype=np.int64)
    run_particles(first, last, np.uint64(prep.seed), *prep.kernel_args(), hist, energy, counters)
    return hist[:prep.n_electrodes], energy, counters


def _chunks(prep, first, last):
    return [(a, min(a + prep.chunk_size, last)) for a in range(first, last, prep.chunk_size)]


def execute(prep: PreparedRun, geom: ChipGeometry, source_kind, workers=1, first=0, last=None, meta=None):
    """Run particles ``first..last-1`` (default all) and return their ledger."""
    last = prep.n_particles if last is None else last
    chunks = _chunks(prep, first, last)
    hist = np.zeros((prep.n_electrodes, prep.n_bins), dtype=np.int64)
    energy = np.zeros(len(ENERGY_NAMES), dtype=np.int64)
    counters = np.zeros(len(COUNTER_NAMES), dtype=np.int64)
    t0 = _time.perf_counter()
    if workers <= 1 or len(chunks) == 1:
        results = (_run_chunk(prep, a, b) for a, b in chunks)
        for h, e, c in results:
            hist += h
            energy += e
            counters += c
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_run_chunk, prep, a, b) for a, b in chunks]
            for f in futs:
                h, e, c = f.result()
                hist += h
                energy += e
                counters += c
    info = dict(meta or {})
    info["wall_clock_s"] = _time.perf_counter() - t0
    return DepositLedger(hist, float(prep.params[K_DT]), energy, counters, last - first, source_kind,
                         geom.hash(), geom.electrode_labels, geom.centers, prep.seed, info)


def injection_energy_meV(config, db=None):
    if config.injector_energy_meV is not None:
        return float(config.injector_energy_meV)
    return 2 * junction_gap_ueV(config) * 1e-3


@dataclass
class InjectionSource:
    position: tuple
    phonon_energy: float      # meV
    count: int


def injection_source(geom, config):
    x, y = geom.injector_position
    return InjectionSource((x, y, geom.thickness * (1 - 1e-9)), injection_energy_meV(config),
                           config.n_particles)


def run_injection(geom: ChipGeometry, config: TransportConfig, db=None, source: InjectionSource | None = None):
    """Trace ``config.n_particles`` injector phonons launched downward from the injector."""
    source = source or injection_source(geom, config)
    if source.count != config.n_particles:
        config = TransportConfig(**{**asdict(config), "n_particles": source.count})
    prep = prepare(SRC_INJECTOR, geom, config, db, source.position, source.phonon_energy)
    meta = {"source": {"kind": "injector", "position_um": list(source.position),
                       "phonon_energy_meV": source.phonon_energy, "count": source.count}}
    return execute(prep, geom, "injector", config.workers, meta=meta)


def run_gamma(geom: ChipGeometry, config: TransportConfig, db=None, impact: GammaImpact | None = None):
    """Trace ``config.n_particles`` e-/h+ pairs from a point deposit."""
    impact = impact or GammaImpact(tuple(config.gamma_position), config.gamma_energy_keV)
    db = db or default_materials()
    prep = prepare(SRC_GAMMA, geom, config, db, impact.position)
    meta = {"source": {"kind": "gamma", "position_um": list(impact.position),
                       "deposit_energy_keV": impact.deposit_energy_keV,
                       "n_eh_gamma": impact.n_pairs(db.substrate.pair_energy), "n_s_eh": config.n_particles}}
    return execute(prep, geom, "gamma", config.workers, meta=meta)


# ---- serialization ----

def write_ledger(ledger: DepositLedger, out_dir, manifest_extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    e_idx, b_idx = np.nonzero(ledger.counts)
    with open(out / "ledger.csv", "w") as f:
        f.write("electrode_id,t_bin_ns,N_qp\n")
        for e, b in zip(e_idx, b_idx):
            f.write(f"{e},{b * ledger.bin_width_ns:.6g},{ledger.counts[e, b]}\n")
    with open(out / "electrodes.csv", "w") as f:
        f.write("electrode_id,label,x_um,y_um\n")
        for i, (lab, c) in enumerate(zip(ledger.electrode_labels, ledger.electrode_centers)):
            f.write(f"{i},{lab},{c[0]:.6g},{c[1]:.6g}\n")
    manifest = {
        "geometry_hash": ledger.geometry_hash,
        "seed": ledger.seed,
        "source_kind": ledger.source_kind,
        "n_source": int(ledger.n_source),
        "bin_width_ns": ledger.bin_width_ns,
        "n_bins": ledger.n_bins,
        "n_electrodes": int(ledger.counts.shape[0]),
        "energy_quanta": {k: int(v) for k, v in zip(ENERGY_NAMES, ledger.energy_q)},
        "energy_quantum_meV": QUANTUM,
        "counters": {k: int(v) for k, v in zip(COUNTER_NAMES, ledger.counters)},
        "totals": ledger.totals(),
        "meta": ledger.meta,
        "outputs": ["ledger.csv", "electrodes.csv"],
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=_json_default)
    return out


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def read_ledger(in_dir):
    d = Path(in_dir)
    man = json.loads((d / "manifest.json").read_text())
    n_e, n_b = man["n_electrodes"], man["n_bins"]
    counts = np.zeros((n_e, n_b), dtype=np.int64)
    dt = man["bin_width_ns"]
    rows = np.loadtxt(d / "ledger.csv", delimiter=",", skiprows=1, ndmin=2)
    for e, t, c in rows:
        counts[int(e), int(round(t / dt))] += int(c)
    el = np.genfromtxt(d / "electrodes.csv", delimiter=",", skip_header=1, dtype=None, encoding=None,
                       ndmin=1)
    labels = tuple(str(r[1]) for r in el) if n_e else ()
    centers = np.array([[r[2], r[3]] for r in el], dtype=float) if n_e else np.zeros((0, 2))
    energy = np.array([man["energy_quanta"][k] for k in ENERGY_NAMES], dtype=np.int64)
    counters = np.array([man["counters"][k] for k in COUNTER_NAMES], dtype=np.int64)
    return DepositLedger(counts, dt, energy, counters, man["n_source"], man["source_kind"],
                         man["geometry_hash"], labels, centers, man["seed"], man.get("meta", {}))


# ---- caustics ----

def caustic_map(substrate, n_phonons=1_000_000, seed=0, thickness=525.0, half_width=1050.0, n_bins=42,
                rotation_deg=45.0, batch=100_000, branch_weights=None):
    """First-arrival top-surface hit histogram for a point source on the bottom face.

    Wave vectors are drawn uniformly over the upward hemisphere; each ray
    follows the exact group velocity of its branch.  Returns
    (counts[x_bin, y_bin], bin edges).
    """
    from .rng import RandomStream
    disp = crystal.Dispersion(substrate, rotation_deg)
    stream = RandomStream(seed, 0)
    if branch_weights is None:
        tab = crystal.build_velocity_table(substrate, rotation_deg, 64, 128)
        branch_weights = crystal.branch_weights(tab, substrate.dos_weight_T, substrate.dos_weight_L)
    cum = np.cumsum(branch_weights)
    edges = np.linspace(-half_width, half_width, n_bins + 1)
    counts = np.zeros((n_bins, n_bins), dtype=np.int64)
    done = 0
    while done < n_phonons:
        m = min(batch, n_phonons - done)
        u = stream.random(3 * m).reshape(3, m)
        mu = u[0]
        phi = 2 * np.pi * u[1]
        st = np.sqrt(1 - mu ** 2)
        k = np.stack([st * np.cos(phi), st * np.sin(phi), mu], axis=1)
        br = np.searchsorted(cum, u[2] * cum[-1], side="right").clip(0, 2)
        vg = disp.group_velocities(k)[np.arange(m), br]
        up = vg[:, 2] > 0
        scale = thickness / vg[up, 2]
        x = vg[up, 0] * scale
        y = vg[up, 1] * scale
        h, _, _ = np.histogram2d(x, y, bins=[edges, edges])
        counts += h.astype(np.int64)
        done += m
    return counts, edges


def fourfold_symmetry_zscore(counts):
    """Largest per-bin |a - b| / sqrt(a + b) between the map and its 90-degree rotation."""
    rot = np.rot90(counts)
    tot = counts + rot
    mask = tot > 0
    z = np.abs(counts - rot)[mask] / np.sqrt(tot[mask])
    return float(z.max()) if z.size else 0.0
