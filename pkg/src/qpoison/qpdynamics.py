"""From QP creation counts to normalized QP density on each electrode.

Generation rates are in units of x_qp per microsecond, times in
microseconds.  The density obeys

    dx/dt = -r x^2 - s x + g(t)

with x(0) = 0 (excess over the baseline), integrated by forward Euler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar
from sklearn.base import BaseEstimator, RegressorMixin

from .transport import DepositLedger
from .units import E_CHARGE, HBAR_MEV_NS

EULER_SUBSTEPS = 10


class DynamicsError(ValueError):
    pass


@dataclass
class QpModelParams:
    r_per_us: float = 100.0                # 1/(10 ns)
    s_per_us: float | np.ndarray = 0.05    # scalar or one value per electrode
    volume_um3: float = 0.6                # 1 x 5 x 0.12
    n_cp_per_um3: float = 4.0e6
    area_scale: float = 20.0

    def validate(self):
        if self.r_per_us < 0 or np.any(np.asarray(self.s_per_us) < 0):
            raise DynamicsError("rates r and s must be non-negative")
        if not (self.volume_um3 > 0 and self.n_cp_per_um3 > 0 and self.area_scale > 0):
            raise DynamicsError("volume, n_cp and area_scale must be positive")

    @property
    def crossover_density(self):
        """Density where recombination r x^2 equals trapping s x."""
        return np.asarray(self.s_per_us) / self.r_per_us


@dataclass
class PulseParams:
    v_bias_mV: float = 1.0
    r_n_kohm: float = 6.9
    t_pulse_us: float = 10.0
    yield_factor: float = 1.673
    delta_ueV: float = 180.0

    def validate(self):
        if self.r_n_kohm <= 0 or self.t_pulse_us < 0:
            raise DynamicsError("R_n must be positive and T_pulse non-negative")
        # below 4 Delta a broken pair cannot emit a second pair-breaking phonon
        if self.v_bias_mV <= 4 * self.delta_ueV * 1e-3:
            raise DynamicsError("bias must exceed 4 Delta/e for the injector yield to apply")

    @property
    def pair_rate_per_s(self):
        return self.v_bias_mV * 1e-3 / (2 * E_CHARGE * self.r_n_kohm * 1e3)

    @property
    def phonon_rate_per_us(self):
        return self.yield_factor * self.pair_rate_per_s * 1e-6


@dataclass
class XqpTrace:
    t_us: np.ndarray            # absolute clock
    x: np.ndarray               # (n_electrodes, n_t)
    origin_us: float = 0.0      # e.g. the end of an injection pulse

    @property
    def t_rel_us(self):
        return self.t_us - self.origin_us

    def relative_to(self, origin_us):
        return replace(self, origin_us=float(origin_us))

    def peak(self, electrode):
        i = int(np.argmax(self.x[electrode]))
        return float(self.x[electrode, i]), float(self.t_rel_us[i])


def _ledger_norm(ledger: DepositLedger, params: QpModelParams):
    if ledger.n_source <= 0:
        raise DynamicsError("ledger has no source particles")
    params.validate()
    dt_us = ledger.bin_width_ns * 1e-3
    return params.area_scale * params.n_cp_per_um3 * params.volume_um3 * dt_us


def response_function(ledger: DepositLedger, params: QpModelParams | None = None):
    """Per-phonon response h(t) (x_qp per us per injected phonon), shape (n_electrodes, n_bins)."""
    params = params or QpModelParams()
    return ledger.counts / (_ledger_norm(ledger, params) * ledger.n_source)


def injection_generation(h, bin_width_us, pulse: PulseParams | None = None):
    """g(t) for a square pulse of phonon current, sampled on the ledger grid.

    The pulse occupies ``round(T_pulse / bin)`` bins starting at t = 0.
    """
    pulse = pulse or PulseParams()
    pulse.validate()
    h = np.atleast_2d(np.asarray(h, dtype=float))
    n_pulse = int(round(pulse.t_pulse_us / bin_width_us))
    if n_pulse == 0:
        return np.zeros_like(h)
    return square_pulse_convolve(h, n_pulse, pulse.phonon_rate_per_us * bin_width_us)


def square_pulse_convolve(h, n_pulse, phonons_per_bin):
    """Discrete convolution of each row of h with ``n_pulse`` bins of constant source."""
    c = np.cumsum(h, axis=1)
    out = c.copy()
    out[:, n_pulse:] -= c[:, :-n_pulse]
    return out * phonons_per_bin


def gamma_generation(ledger: DepositLedger, n_eh_gamma, params: QpModelParams | None = None):
    """g(t) for one impact, scaling the simulated pairs linearly to ``n_eh_gamma``."""
    params = params or QpModelParams()
    return ledger.counts * (n_eh_gamma / (_ledger_norm(ledger, params) * ledger.n_source))


def solve_xqp(g, bin_width_us, params: QpModelParams | None = None, dt_us=None, x0=0.0,
              t_end_us=None, origin_us=0.0):
    """Forward-Euler x_qp(t) for each row of g, reported at the bin edges t_i = i * bin.

    Each g[i] is the mean rate over bin i, so it is placed at the bin centre
    and interpolated linearly between centres; the outer half bins hold their
    value.  The integral of the interpolant then equals sum(g) * bin exactly.
    Beyond the last bin g is zero.  The default step is a tenth of a bin.
    """
    params = params or QpModelParams()
    params.validate()
    g = np.atleast_2d(np.asarray(g, dtype=float))
    if dt_us is None:
        dt_us = bin_width_us / EULER_SUBSTEPS
    if not dt_us > 0:
        raise DynamicsError("time step must be positive")
    if dt_us > bin_width_us * (1 + 1e-12):
        raise DynamicsError("time step must not exceed the grid spacing")
    n_g = g.shape[1]
    n_t = n_g + 1 if t_end_us is None else int(round(t_end_us / bin_width_us)) + 1
    sub = int(round(bin_width_us / dt_us))
    if abs(sub * dt_us - bin_width_us) > 1e-9 * bin_width_us:
        raise DynamicsError("grid spacing must be an integer multiple of the time step")
    r = params.r_per_us
    s = np.broadcast_to(np.asarray(params.s_per_us, dtype=float), (g.shape[0],))
    left = np.concatenate([g[:, :1], g[:, :-1]], axis=1)
    right = np.concatenate([g[:, 1:], g[:, -1:]], axis=1)
    x = np.broadcast_to(np.asarray(x0, dtype=float), (g.shape[0],)).copy()
    out = np.empty((g.shape[0], n_t))
    out[:, 0] = x
    # forcing sampled at the middle of each step
    frac = (np.arange(sub) + 0.5) / sub
    zero = np.zeros(g.shape[0])
    for i in range(n_t - 1):
        if i < n_g:
            gi, gl, gr = g[:, i], left[:, i], right[:, i]
        else:
            gi = gl = gr = zero
        for f in frac:
            if f < 0.5:
                gt = gl + (gi - gl) * (f + 0.5)
            else:
                gt = gi + (gr - gi) * (f - 0.5)
            x = x + dt_us * (gt - r * x * x - s * x)
            np.maximum(x, 0.0, out=x)
        out[:, i + 1] = x
    return XqpTrace(np.arange(n_t) * bin_width_us, out, origin_us)


def _pair_rate_per_s(delta_ueV, f01_GHz):
    # sqrt(2 Delta omega01 / hbar) in 1/s
    delta_over_hbar = delta_ueV * 1e-3 / (HBAR_MEV_NS * 1e-9)
    return np.sqrt(2.0 * delta_over_hbar * 2 * np.pi * f01_GHz * 1e9)


def xqp_from_delta_gamma1(delta_gamma1_per_us, delta_ueV=180.0, f01_GHz=5.0):
    return np.pi * np.asarray(delta_gamma1_per_us) * 1e6 / _pair_rate_per_s(delta_ueV, f01_GHz)


def delta_gamma1_from_xqp(x_qp, delta_ueV=180.0, f01_GHz=5.0):
    return np.asarray(x_qp) * _pair_rate_per_s(delta_ueV, f01_GHz) / np.pi * 1e-6


def t1qp_from_xqp(x_qp, delta_ueV=180.0, f01_GHz=5.0):
    """QP-limited T1 in us (infinite for x_qp = 0)."""
    with np.errstate(divide="ignore"):
        return 1.0 / delta_gamma1_from_xqp(x_qp, delta_ueV, f01_GHz)


def threshold_xqp(t1_us=10.0, delta_ueV=180.0, f01_GHz=5.0):
    """x_qp at which the QP-limited T1 equals ``t1_us``."""
    return float(xqp_from_delta_gamma1(1.0 / t1_us, delta_ueV, f01_GHz))


@dataclass
class Footprint:
    t_us: np.ndarray
    extent_um: np.ndarray
    threshold_xqp: float
    row_x_um: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def max_extent_um(self):
        return float(self.extent_um.max()) if self.extent_um.size else 0.0

    def recovery_time_us(self, origin_us=0.0):
        """Time after ``origin_us`` at which the footprint last drops to zero."""
        on = np.nonzero(self.extent_um > 0)[0]
        if on.size == 0:
            return 0.0
        last = on[-1]
        t_off = self.t_us[last + 1] if last + 1 < self.t_us.size else np.inf
        return float(t_off - origin_us)


def row_indices(centers, y0=0.0, tol=None):
    """Electrodes on the row nearest to y0, sorted by x."""
    centers = np.asarray(centers, dtype=float)
    if centers.size == 0:
        return np.zeros(0, dtype=int)
    dy = np.abs(centers[:, 1] - y0)
    tol = 1e-6 if tol is None else tol
    sel = np.nonzero(dy <= dy.min() + tol)[0]
    return sel[np.argsort(centers[sel, 0])]


def footprint(trace: XqpTrace, centers, pitch_um, threshold_t1_us=10.0, f01_GHz=5.0, delta_ueV=180.0,
              y0=0.0):
    """Length along the y = y0 row over which T1_qp is below threshold, per time sample.

    The extent is the contiguous hull of sub-threshold electrodes times the
    electrode pitch, and zero when none is below threshold.
    """
    thr = threshold_xqp(threshold_t1_us, delta_ueV, f01_GHz)
    row = row_indices(centers, y0)
    x_row = np.asarray(centers, dtype=float)[row, 0] if row.size else np.zeros(0)
    below = trace.x[row] > thr                      # (n_row, n_t)
    extent = np.zeros(trace.x.shape[1])
    if row.size:
        any_on = below.any(axis=0)
        first = np.argmax(below, axis=0)
        last = row.size - 1 - np.argmax(below[::-1], axis=0)
        span = x_row[last] - x_row[first] + pitch_um
        extent = np.where(any_on, span, 0.0)
    return Footprint(trace.t_us - trace.origin_us, extent, thr, x_row)


def recovery_time_constant(t_us, x, lo=0.1, hi=0.7):
    """Exponential decay constant (us) of x after its peak, fit where x is within [lo, hi] of peak."""
    x = np.asarray(x, dtype=float)
    t_us = np.asarray(t_us, dtype=float)
    i = int(np.argmax(x))
    peak = x[i]
    tail_t = t_us[i:]
    tail = x[i:]
    sel = (tail >= lo * peak) & (tail <= hi * peak)
    # stop at the first return below lo so late noise does not enter the fit
    below = np.nonzero(tail < lo * peak)[0]
    if below.size:
        sel[below[0]:] = False
    if sel.sum() < 3 or peak <= 0:
        raise DynamicsError("not enough decay samples to fit a time constant")
    slope = np.polyfit(tail_t[sel], np.log(tail[sel]), 1)[0]
    if slope >= 0:
        raise DynamicsError("trace does not decay after its peak")
    return -1.0 / slope


def injection_trace(ledger: DepositLedger, pulse: PulseParams | None = None,
                    params: QpModelParams | None = None, dt_us=None):
    """Full pulse pipeline: ledger -> h -> g -> x_qp, clock zeroed at the pulse end."""
    pulse = pulse or PulseParams()
    params = params or QpModelParams()
    h = response_function(ledger, params)
    dt_bin = ledger.bin_width_ns * 1e-3
    g = injection_generation(h, dt_bin, pulse)
    n_pulse = int(round(pulse.t_pulse_us / dt_bin))
    return solve_xqp(g, dt_bin, params, dt_us=dt_us, origin_us=n_pulse * dt_bin)


def gamma_trace(ledger: DepositLedger, n_eh_gamma, params: QpModelParams | None = None, dt_us=None):
    params = params or QpModelParams()
    g = gamma_generation(ledger, n_eh_gamma, params)
    return solve_xqp(g, ledger.bin_width_ns * 1e-3, params, dt_us=dt_us)


class TrappingRateFit(RegressorMixin, BaseEstimator):
    """Least-squares trapping rate s for one electrode's generation rate.

    ``fit(t_us, x_measured)`` scans s on a log grid, then refines around the
    best grid point with a bounded scalar minimizer.
    """

    def __init__(self, generation=None, bin_width_us=1.0, r_per_us=100.0, s_min=1e-3, s_max=1.0,
                 n_grid=41, tol=1e-3):
        self.generation = generation
        self.bin_width_us = bin_width_us
        self.r_per_us = r_per_us
        self.s_min = s_min
        self.s_max = s_max
        self.n_grid = n_grid
        self.tol = tol

    def _model(self, s, t_us):
        g = np.atleast_2d(np.asarray(self.generation, dtype=float))
        t_end = max(float(np.max(t_us)), (g.shape[1] - 1) * self.bin_width_us)
        tr = solve_xqp(g, self.bin_width_us, QpModelParams(r_per_us=self.r_per_us, s_per_us=s),
                       t_end_us=math.ceil(t_end / self.bin_width_us) * self.bin_width_us)
        return np.interp(t_us, tr.t_us, tr.x[0])

    def _sse(self, s, t_us, y):
        return float(np.sum((self._model(s, t_us) - y) ** 2))

    def fit(self, X, y):
        if self.generation is None:
            raise DynamicsError("generation rate g(t) is required")
        t_us = np.ravel(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        grid = np.geomspace(self.s_min, self.s_max, self.n_grid)
        sse = np.array([self._sse(s, t_us, y) for s in grid])
        k = int(np.argmin(sse))
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
        res = minimize_scalar(self._sse, bounds=(lo, hi), args=(t_us, y), method="bounded",
                              options={"xatol": self.tol})
        best = (res.x, res.fun) if res.fun <= sse[k] else (grid[k], sse[k])
        self.s_, self.residual_ = float(best[0]), float(math.sqrt(best[1] / max(y.size, 1)))
        return self

    def predict(self, X):
        return self._model(self.s_, np.ravel(np.asarray(X, dtype=float)))
