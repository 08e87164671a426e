"""Elastic dispersion of the cubic substrate and bulk phonon processes.

Phase velocities come from the Christoffel eigenproblem
``rho v^2 e_i = C_ijml k_j k_m e_l``; group velocities are the gradient of
``omega(k) = v(k_hat)|k|``, taken by central differences on the
phase-velocity surface.  Branches are ordered by eigenvalue: slow
transverse, fast transverse, longitudinal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from numba import njit

from .rng import as_stream, uniform, uniform_open
from .units import H_MEV_S


class Branch(IntEnum):
    SlowTransverse = 0
    FastTransverse = 1
    Longitudinal = 2


N_BRANCH = 3
FD_STEP = 1e-5
DEGENERACY_TOL = 1e-7

KERNEL_STANDARD = 0
KERNEL_UNIFORM = 1
DECAY_LTT = 0
DECAY_LLT = 1


class CrystalError(ValueError):
    pass


@dataclass(frozen=True)
class DispersionSolution:
    phase_velocity: np.ndarray      # (3,) um/ns, by branch
    polarization: np.ndarray        # (3, 3) rows are unit vectors
    group_velocity: np.ndarray      # (3, 3) rows, um/ns
    degenerate: bool = False


def rotation_z(angle_deg):
    """Crystal-to-chip rotation about the surface normal."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def cubic_christoffel(k, C11, C12, C44, rho):
    """Christoffel matrices ``Gamma/rho`` for crystal-frame directions ``k`` (..., 3)."""
    k = np.asarray(k, dtype=float)
    k1, k2, k3 = k[..., 0], k[..., 1], k[..., 2]
    G = np.empty(k.shape[:-1] + (3, 3))
    G[..., 0, 0] = C11 * k1 * k1 + C44 * (k2 * k2 + k3 * k3)
    G[..., 1, 1] = C11 * k2 * k2 + C44 * (k1 * k1 + k3 * k3)
    G[..., 2, 2] = C11 * k3 * k3 + C44 * (k1 * k1 + k2 * k2)
    c = C12 + C44
    G[..., 0, 1] = G[..., 1, 0] = c * k1 * k2
    G[..., 0, 2] = G[..., 2, 0] = c * k1 * k3
    G[..., 1, 2] = G[..., 2, 1] = c * k2 * k3
    return G / rho


def _tangent_basis(k):
    """Two unit vectors orthogonal to each ``k`` and to each other."""
    ref = np.where(np.abs(k[..., :1]) < 0.9, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    e1 = np.cross(k, ref)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(k, e1)
    return e1, e2


class Dispersion:
    """Christoffel solver for one cubic substrate in a rotated chip frame."""

    def __init__(self, substrate, rotation_deg=45.0):
        self.substrate = substrate
        self.C = (substrate.C11, substrate.C12, substrate.C44)
        self.rho = substrate.mass_density
        self.rotation = rotation_z(rotation_deg)

    def phase_velocities(self, k_chip):
        """Sorted phase velocities (..., 3) and polarizations (..., 3, 3) in the chip frame."""
        k_cry = np.asarray(k_chip, dtype=float) @ self.rotation
        w, vecs = np.linalg.eigh(cubic_christoffel(k_cry, *self.C, self.rho))
        if np.any(w <= 0):
            raise CrystalError("non-positive Christoffel eigenvalue; elastic constants not stable")
        # eigenvectors are columns; return rows rotated back to the chip frame
        pol = np.swapaxes(vecs, -1, -2) @ self.rotation.T
        return np.sqrt(w), pol, w

    def group_velocities(self, k_chip, step=FD_STEP):
        """Group velocity vectors (..., 3, 3) [branch, xyz] by central differences."""
        k = np.asarray(k_chip, dtype=float)
        v0, _, _ = self.phase_velocities(k)
        e1, e2 = _tangent_basis(k)
        c, s = math.cos(step), math.sin(step)
        grad = []
        for e in (e1, e2):
            vp, _, _ = self.phase_velocities(c * k + s * e)
            vm, _, _ = self.phase_velocities(c * k - s * e)
            grad.append((vp - vm) / (2.0 * step))
        vg = (v0[..., :, None] * k[..., None, :]
              + grad[0][..., :, None] * e1[..., None, :]
              + grad[1][..., :, None] * e2[..., None, :])
        return vg

    def solve(self, k_hat):
        k = np.asarray(k_hat, dtype=float)
        if k.shape != (3,) or abs(np.linalg.norm(k) - 1.0) > 1e-9:
            raise CrystalError("k_hat must be a unit 3-vector")
        v, pol, w = self.phase_velocities(k)
        gaps = np.diff(w) / w[-1]
        return DispersionSolution(v, pol, self.group_velocities(k), bool(np.any(gaps < DEGENERACY_TOL)))


def christoffel_solve(k_hat, substrate, rotation_deg=0.0):
    """Phase/group velocities and polarizations along ``k_hat`` (chip frame)."""
    return Dispersion(substrate, rotation_deg).solve(k_hat)


@dataclass(frozen=True)
class VelocityTable:
    """Group velocity on a regular (cos theta, phi) grid, chip frame.

    ``vg`` has shape (3, n_mu, n_phi, 3).  ``mean_speed`` is the
    direction-averaged group speed per branch, used in isotropic mode.
    """
    vg: np.ndarray
    mean_speed: np.ndarray
    inv_cube_mean: np.ndarray

    @property
    def n_mu(self):
        return self.vg.shape[1]

    @property
    def n_phi(self):
        return self.vg.shape[2]


def build_velocity_table(substrate, rotation_deg=45.0, n_mu=256, n_phi=512):
    disp = Dispersion(substrate, rotation_deg)
    mu = np.linspace(-1.0, 1.0, n_mu)
    phi = np.arange(n_phi) * (2 * np.pi / n_phi)
    st = np.sqrt(np.clip(1 - mu ** 2, 0, None))
    k = np.stack([st[:, None] * np.cos(phi)[None, :],
                  st[:, None] * np.sin(phi)[None, :],
                  np.broadcast_to(mu[:, None], (n_mu, n_phi))], axis=-1)
    vg = disp.group_velocities(k)                   # (n_mu, n_phi, 3, 3)
    vg = np.ascontiguousarray(np.moveaxis(vg, 2, 0))  # (3, n_mu, n_phi, 3)
    # uniform weights in mu are uniform in solid angle (trapezoid ends halved)
    wmu = np.full(n_mu, 1.0)
    wmu[[0, -1]] = 0.5
    wmu /= wmu.sum()
    speed = np.linalg.norm(vg, axis=-1)
    mean_speed = np.einsum("bmp,m->b", speed, wmu) / n_phi
    vphase, _, _ = disp.phase_velocities(k)
    inv_cube = np.einsum("mpb,m->b", vphase ** -3.0, wmu) / n_phi
    return VelocityTable(vg, mean_speed, inv_cube)


def branch_weights(table, dos_T, dos_L):
    """Per-branch selection weights: transverse weight split by <1/v^3>."""
    t = table.inv_cube_mean[:2]
    split = t / t.sum()
    return np.array([dos_T * split[0], dos_T * split[1], dos_L])


def isotope_scattering_rate(nu_hz, B):
    """Isotope (Rayleigh-like) scattering rate in 1/s, all branches."""
    nu = np.asarray(nu_hz, dtype=float)
    if np.any(nu < 0):
        raise CrystalError("frequency must be non-negative")
    return B * nu ** 4


def anharmonic_rate(nu_hz, A):
    """Anharmonic decay rate in 1/s; applies to longitudinal phonons only."""
    nu = np.asarray(nu_hz, dtype=float)
    if np.any(nu < 0):
        raise CrystalError("frequency must be non-negative")
    return A * nu ** 5


def energy_to_hz(energy_meV):
    return np.asarray(energy_meV, dtype=float) / H_MEV_S


# ---- numba kernels shared with the transport loop ----

@njit(inline="always", error_model="numpy", cache=True)
def unit_circle(s):
    """(cos, sin) of a uniform angle by polar rejection (avoids trig calls)."""
    while True:
        x = 2.0 * uniform(s) - 1.0
        y = 2.0 * uniform(s) - 1.0
        r2 = x * x + y * y
        if 0.0 < r2 <= 1.0:
            r = math.sqrt(r2)
            return x / r, y / r


@njit(inline="always", error_model="numpy", cache=True)
def sphere(s):
    """Uniform unit vector as a tuple."""
    mu = 2.0 * uniform(s) - 1.0
    c, sn = unit_circle(s)
    st = math.sqrt(max(0.0, 1.0 - mu * mu))
    return st * c, st * sn, mu


@njit(inline="always", error_model="numpy", cache=True)
def sample_sphere(s, out):
    out[0], out[1], out[2] = sphere(s)


@njit(inline="always", error_model="numpy", cache=True)
def sample_branch(s, cum_w):
    u = uniform(s)
    if u < cum_w[0]:
        return 0
    if u < cum_w[1]:
        return 1
    return 2


@njit(error_model="numpy", cache=True)
def sample_anharmonic(s, kernel, p_ltt, vT, vL):
    """Return (fraction x of the first daughter, decay channel).

    Channel LTT gives two transverse daughters with fractions x, 1-x;
    channel LLT gives a longitudinal daughter with fraction x and a
    transverse one with 1-x.  The standard kernel draws x from
    x^2 (1-x)^2 inside the isotropic kinematic window of the channel.
    """
    channel = DECAY_LTT if uniform(s) < p_ltt else DECAY_LLT
    if kernel == KERNEL_UNIFORM:
        return uniform_open(s), channel
    if channel == DECAY_LTT:
        r = vT / vL
        lo = 0.5 * (1.0 - r)
        hi = 0.5 * (1.0 + r)
    else:
        d = vL / vT
        lo = (d - 1.0) / (d + 1.0)
        hi = 1.0
    while True:
        x = lo + (hi - lo) * uniform_open(s)
        if uniform(s) * 0.0625 <= x * x * (1.0 - x) * (1.0 - x):
            return x, channel


@njit(error_model="numpy", cache=True)
def _isotope_batch(seed_state, cum_w, n, dirs, branches):
    for i in range(n):
        sample_sphere(seed_state, dirs[i])
        branches[i] = sample_branch(seed_state, cum_w)


@njit(error_model="numpy", cache=True)
def _anharmonic_batch(state, kernel, p_ltt, vT, vL, e_parent, e1, e2, chan):
    for i in range(e1.shape[0]):
        x, c = sample_anharmonic(state, kernel, p_ltt, vT, vL)
        a = np.int64(x * e_parent)
        e1[i] = a
        e2[i] = e_parent - a
        chan[i] = c


def sample_isotope_scatter(rng, n, branch_cum_weights):
    """``n`` isotope scatters: uniform new directions and DOS-weighted branches."""
    stream = as_stream(rng)
    dirs = np.empty((n, 3))
    branches = np.empty(n, dtype=np.int64)
    _isotope_batch(stream.state, np.asarray(branch_cum_weights, dtype=float), n, dirs, branches)
    return dirs, branches


def sample_anharmonic_decay(rng, e_parent_quanta, n=1, kernel=KERNEL_STANDARD, p_ltt=0.75,
                            vT=5.84, vL=8.43):
    """Daughter energies (integer quanta) for ``n`` decays of one parent energy."""
    stream = as_stream(rng)
    e1 = np.empty(n, dtype=np.int64)
    e2 = np.empty(n, dtype=np.int64)
    chan = np.empty(n, dtype=np.int64)
    _anharmonic_batch(stream.state, kernel, p_ltt, vT, vL, np.int64(e_parent_quanta), e1, e2, chan)
    return e1, e2, chan
