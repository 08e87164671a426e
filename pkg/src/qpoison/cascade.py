"""Phonon interactions with metal films: entry/escape and down-conversion cascades.

Energies inside the kernels are int64 multiples of ``QUANTUM`` meV so that
every split conserves energy exactly and per-run totals can be summed in
any order with identical results.

Superconducting films split a phonon into two quasiparticles with the
Kaplan pair-breaking density; quasiparticles at or above 3 Delta relax by
emitting phonons with density ``x^2 rho(E') (1 - Delta^2/(E E'))``.  Both
are sampled by a change of variables that removes the square-root edge
singularities followed by rejection against a closed-form bound.  Normal
metals use a uniform first split and the ``x (E - x)^2`` emission density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .materials import (NormalMetalParams, SuperconductorParams, normal_rate_coefficient)
from .rng import as_stream, uniform, uniform_open
from .units import HBAR_MEV_NS

QUANTUM = 1e-9          # meV per energy quantum
FILM_SC = 0
FILM_NM = 1
STACK_SIZE = 16384

# film parameter vector layout, shared with the transport kernel
P_KIND, P_GAP, P_THICK, P_VS, P_RATE, P_ABS = range(6)


class CascadeError(ValueError):
    pass


def to_quanta(energy_meV):
    return int(round(energy_meV / QUANTUM))


def escape_probability(l, lam):
    """Probability of leaving a film along path ``l`` with mean free path ``lam``."""
    l = np.asarray(l, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(l <= 0) or np.any(lam <= 0):
        raise CascadeError("path length and mean free path must be positive")
    out = np.exp(-2.0 * l / lam)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class FilmSpec:
    """Film with the numbers the cascade needs.

    For superconductors ``gap`` is Delta (meV) and ``rate_param`` is
    tau0_ph (ns).  For normal metals ``gap`` is the tracking threshold
    2 Delta_junc (meV) and ``rate_param`` is Gamma/omega.
    """
    name: str
    kind: int
    gap: float
    thickness: float      # um
    v_s: float
    rate_param: float
    p_abs: float

    def params(self):
        return np.array([self.kind, float(to_quanta(self.gap)), self.thickness, self.v_s,
                         self.rate_param, self.p_abs])

    def mean_free_path(self, energy_meV):
        return float(_mfp(self.params(), float(energy_meV)))

    @classmethod
    def superconductor(cls, sc: SuperconductorParams, thickness_um, gap_ueV=None):
        gap = sc.gap if gap_ueV is None else gap_ueV
        return cls(sc.name, FILM_SC, gap * 1e-3, float(thickness_um), sc.v_s, sc.phonon_lifetime, sc.p_abs)

    @classmethod
    def normal_metal(cls, nm: NormalMetalParams, thickness_um, threshold_meV):
        return cls(nm.name, FILM_NM, float(threshold_meV), float(thickness_um), nm.v_s,
                   normal_rate_coefficient(nm), nm.p_abs)


@dataclass
class CascadeOutcome:
    incident: float                  # meV
    qp_count: int
    qp_energy_deposited: float       # meV (heat for normal metals)
    returned_phonons: np.ndarray     # meV
    incident_quanta: int = 0
    deposited_quanta: int = 0
    returned_quanta: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def energy_balance_quanta(self):
        return self.incident_quanta - self.deposited_quanta - int(self.returned_quanta.sum())


# ---- samplers ----

@njit(error_model="numpy", cache=True)
def sample_pair_split(s, omega, delta):
    """Energy of one quasiparticle when a phonon ``omega`` breaks a pair.

    E = Delta + (omega - 2 Delta) sin^2(t/2) maps the density onto
    g(t) = (ab + Delta^2) / sqrt((a + Delta)(b + Delta)) with a = E,
    b = omega - E, which is bounded by sqrt(omega^2/4 + Delta^2).
    """
    w = omega - 2.0 * delta
    if w <= 1e-12 * omega:
        return 0.5 * omega
    bound = math.sqrt(0.25 * omega * omega + delta * delta)
    while True:
        sn = math.sin(0.5 * math.pi * uniform(s))
        e = delta + w * sn * sn
        b = omega - e
        g = (e * b + delta * delta) / math.sqrt((e + delta) * (b + delta))
        if uniform(s) * bound <= g:
            return e


@njit(error_model="numpy", cache=True)
def sample_qp_relaxation(s, energy, delta):
    """Final quasiparticle energy E' after one phonon emission from ``energy``.

    With E' = Delta + (E - Delta) u^2 the density becomes
    h(u) = x^2 (E' - Delta^2/E) / sqrt(E' + Delta), x = E - E', bounded by
    (c - y)^2 sqrt(y) at y = max(c/5, 2 Delta), c = E + Delta.
    """
    c = energy + delta
    y = max(0.2 * c, 2.0 * delta)
    bound = (c - y) * (c - y) * math.sqrt(y)
    span = energy - delta
    d2 = delta * delta / energy
    while True:
        u = uniform_open(s)
        ep = delta + span * u * u
        x = energy - ep
        h = x * x * (ep - d2) / math.sqrt(ep + delta)
        if uniform(s) * bound <= h:
            return ep


@njit(error_model="numpy", cache=True)
def sample_nm_emission(s, energy):
    """Phonon energy emitted by a normal-metal excitation, density x (E - x)^2."""
    bound = 4.0 * energy ** 3 / 27.0
    while True:
        x = energy * uniform_open(s)
        r = energy - x
        if uniform(s) * bound <= x * r * r:
            return x


@njit(inline="always", error_model="numpy", cache=True)
def _mfp(film, energy):
    if film[P_KIND] == FILM_SC:
        delta = film[P_GAP] * QUANTUM
        rate = (1.0 + 0.29 * (energy / delta - 2.0)) / film[P_RATE]
    else:
        rate = film[P_RATE] * energy / HBAR_MEV_NS
    return film[P_VS] / rate


@njit(inline="always", error_model="numpy", cache=True)
def _escapes(s, film, energy_q, path):
    lam = _mfp(film, energy_q * QUANTUM)
    return uniform(s) < math.exp(-2.0 * path / lam)


@njit(inline="always", error_model="numpy", cache=True)
def _inner_escapes(s, film, energy_q):
    d = film[P_THICK]
    path = 1.5 * d if uniform(s) < 0.5 else 0.5 * d
    return _escapes(s, film, energy_q, path)


@njit(error_model="numpy", cache=True)
def entry_survives(s, film, energy_q):
    """True when the phonon crosses the film (path 2d) without interacting."""
    return _escapes(s, film, energy_q, 2.0 * film[P_THICK])


@njit(error_model="numpy", cache=True)
def sc_cascade_q(s, film, e_q, returned, phonons, qps):
    """Superconducting cascade; returns (n_qp, deposited quanta, n_returned)."""
    delta_q = np.int64(film[P_GAP])
    delta = delta_q * QUANTUM
    two_q = 2 * delta_q
    three_q = 3 * delta_q
    n_ret = 0
    n_qp = 0
    dep = np.int64(0)
    n_ph = 1
    phonons[0] = e_q
    n_q = 0
    while n_ph > 0 or n_q > 0:
        if n_q > 0:
            n_q -= 1
            e = qps[n_q]
            if e < three_q:
                n_qp += 1
                dep += e
                continue
            ep = np.int64(round(sample_qp_relaxation(s, e * QUANTUM, delta) / QUANTUM))
            if ep < delta_q:
                ep = delta_q
            if ep > e - 1:
                ep = e - 1
            x = e - ep
            qps[n_q] = ep
            n_q += 1
            if x >= two_q and not _inner_escapes(s, film, x):
                phonons[n_ph] = x
                n_ph += 1
            else:
                returned[n_ret] = x
                n_ret += 1
            continue
        n_ph -= 1
        p = phonons[n_ph]
        e1 = np.int64(round(sample_pair_split(s, p * QUANTUM, delta) / QUANTUM))
        if e1 < delta_q:
            e1 = delta_q
        if e1 > p - delta_q:
            e1 = p - delta_q
        qps[n_q] = e1
        qps[n_q + 1] = p - e1
        n_q += 2
        if n_q + 2 >= qps.shape[0] or n_ph + 2 >= phonons.shape[0] or n_ret + 2 >= returned.shape[0]:
            raise RuntimeError("cascade stack overflow")
    return n_qp, dep, n_ret


@njit(error_model="numpy", cache=True)
def nm_cascade_q(s, film, e_q, returned, phonons):
    """Normal-metal cascade; returns (0, heat quanta, n_returned)."""
    thr = np.int64(film[P_GAP])
    n_ret = 0
    heat = np.int64(0)
    n_ph = 1
    phonons[0] = e_q
    while n_ph > 0:
        n_ph -= 1
        p = phonons[n_ph]
        if p < thr:
            heat += p
            continue
        e1 = np.int64(round(uniform(s) * p))
        for k in range(2):
            e = e1 if k == 0 else p - e1
            while e >= thr:
                x = np.int64(round(sample_nm_emission(s, e * QUANTUM) / QUANTUM))
                if x < 1:
                    x = 1
                if x > e:
                    x = e
                e -= x
                if x >= thr:
                    if _inner_escapes(s, film, x):
                        returned[n_ret] = x
                        n_ret += 1
                    else:
                        phonons[n_ph] = x
                        n_ph += 1
                else:
                    heat += x
            heat += e
        if n_ph + 2 >= phonons.shape[0] or n_ret + 2 >= returned.shape[0]:
            raise RuntimeError("cascade stack overflow")
    return 0, heat, n_ret


@njit(error_model="numpy", cache=True)
def film_cascade_q(s, film, e_q, returned, phonons, qps):
    if film[P_KIND] == FILM_SC:
        return sc_cascade_q(s, film, e_q, returned, phonons, qps)
    return nm_cascade_q(s, film, e_q, returned, phonons)


@njit(error_model="numpy", cache=True)
def injector_yield_kernel(s, pair_energy, delta, n_trials):
    """Total pair-breaking phonons emitted by ``n_trials`` broken pairs."""
    total = 0
    two = 2.0 * delta
    three = 3.0 * delta
    for _ in range(n_trials):
        e1 = sample_pair_split(s, pair_energy, delta)
        for k in range(2):
            e = e1 if k == 0 else pair_energy - e1
            while e >= three:
                ep = sample_qp_relaxation(s, e, delta)
                if e - ep >= two:
                    total += 1
                e = ep
        total += 1      # the two gap-edge quasiparticles recombine into one 2 Delta phonon
    return total


@njit(error_model="numpy", cache=True)
def _sc_batch(s, film, e_q, n, qp_counts, deposited, returned_sum, returned_max):
    returned = np.empty(STACK_SIZE, dtype=np.int64)
    phonons = np.empty(STACK_SIZE, dtype=np.int64)
    qps = np.empty(STACK_SIZE, dtype=np.int64)
    for i in range(n):
        nq, dep, nr = film_cascade_q(s, film, e_q, returned, phonons, qps)
        qp_counts[i] = nq
        deposited[i] = dep
        tot = np.int64(0)
        mx = np.int64(0)
        for j in range(nr):
            tot += returned[j]
            if returned[j] > mx:
                mx = returned[j]
        returned_sum[i] = tot
        returned_max[i] = mx


@njit(error_model="numpy", cache=True)
def _sample_batch(s, which, a, b, out):
    for i in range(out.shape[0]):
        if which == 0:
            out[i] = sample_pair_split(s, a, b)
        elif which == 1:
            out[i] = sample_qp_relaxation(s, a, b)
        else:
            out[i] = sample_nm_emission(s, a)


def _run_single(film, energy_meV, rng):
    stream = as_stream(rng)
    e_q = to_quanta(energy_meV)
    returned = np.empty(STACK_SIZE, dtype=np.int64)
    phonons = np.empty(STACK_SIZE, dtype=np.int64)
    qps = np.empty(STACK_SIZE, dtype=np.int64)
    nq, dep, nr = film_cascade_q(stream.state, film.params(), e_q, returned, phonons, qps)
    ret = returned[:nr].copy()
    return CascadeOutcome(energy_meV, int(nq), dep * QUANTUM, ret * QUANTUM, e_q, int(dep), ret)


def sc_cascade(energy_meV, film: FilmSpec, rng=None):
    """One superconducting cascade for a phonon that has already entered the film."""
    if film.kind != FILM_SC:
        raise CascadeError("sc_cascade needs a superconducting film")
    if to_quanta(energy_meV) < 2 * to_quanta(film.gap):
        raise CascadeError(f"phonon energy {energy_meV} meV is below 2*Delta; no pair breaking")
    return _run_single(film, energy_meV, rng)


def nm_cascade(energy_meV, film: FilmSpec, rng=None):
    """One normal-metal cascade; deposited energy is heat and ``qp_count`` is 0."""
    if film.kind != FILM_NM:
        raise CascadeError("nm_cascade needs a normal-metal film")
    if not energy_meV > 0:
        raise CascadeError("phonon energy must be positive")
    return _run_single(film, energy_meV, rng)


def cascade_batch(energy_meV, film: FilmSpec, n, rng=None):
    """Statistics of ``n`` independent cascades (QP counts, deposited/returned quanta)."""
    stream = as_stream(rng)
    qp = np.empty(n, dtype=np.int64)
    dep = np.empty(n, dtype=np.int64)
    ret = np.empty(n, dtype=np.int64)
    mx = np.empty(n, dtype=np.int64)
    _sc_batch(stream.state, film.params(), to_quanta(energy_meV), n, qp, dep, ret, mx)
    return {"qp_count": qp, "deposited_q": dep, "returned_q": ret, "returned_max_q": mx,
            "incident_q": to_quanta(energy_meV)}


def sample_pair_split_batch(omega, delta, n, rng=None):
    out = np.empty(n)
    _sample_batch(as_stream(rng).state, 0, float(omega), float(delta), out)
    return out


def sample_qp_relaxation_batch(energy, delta, n, rng=None):
    out = np.empty(n)
    _sample_batch(as_stream(rng).state, 1, float(energy), float(delta), out)
    return out


def sample_nm_emission_batch(energy, n, rng=None):
    out = np.empty(n)
    _sample_batch(as_stream(rng).state, 2, float(energy), 0.0, out)
    return out


def injector_yield(pair_energy, delta, rng=None, n_trials=1_000_000):
    """Mean pair-breaking phonons (E >= 2 Delta) emitted per broken pair."""
    if pair_energy < 2 * delta * (1 - 1e-12):
        raise CascadeError("pair energy below 2*Delta")
    stream = as_stream(rng)
    return injector_yield_kernel(stream.state, float(max(pair_energy, 2 * delta)), float(delta),
                                 int(n_trials)) / n_trials
