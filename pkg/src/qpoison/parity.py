"""Synthetic charge-parity records and their statistics.

Parity samples are booleans taken every ``dt_rep`` seconds.  For spectral
work they are mapped to +-1; the two-sided power spectral density of a
telegraph process switching at rate Gamma and read out with fidelity F is

    S(f) = 4 F^2 Gamma / ((2 Gamma)^2 + (2 pi f)^2) + (1 - F^2) dt_rep.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit
from scipy.signal import welch
from sklearn.base import BaseEstimator, RegressorMixin

N_SEGMENTS = 8
ROOT_TOL = 1e-12


class ParityError(ValueError):
    pass


class FitError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class InfeasibleError(ValueError):
    pass


@dataclass
class ParityTrace:
    samples: np.ndarray          # bool, reported parity
    dt_rep: float                # s
    gamma_p: float               # 1/s, true switching rate
    fidelity: float
    hidden: np.ndarray | None = None

    def __post_init__(self):
        if self.samples.size == 0:
            raise ParityError("trace must contain samples")
        if not 0.0 <= self.fidelity <= 1.0:
            raise ParityError("fidelity must lie in [0, 1]")

    def __len__(self):
        return self.samples.size


def simulate_trace(gamma_p, fidelity=1.0, n_samples=20_000, dt_rep=0.01, seed=None):
    """Telegraph parity sampled every ``dt_rep``; each sample is right with probability (1 + F)/2."""
    if gamma_p < 0 or dt_rep <= 0 or n_samples <= 0:
        raise ParityError("need gamma_p >= 0, dt_rep > 0 and n_samples > 0")
    if gamma_p * dt_rep >= 10:
        raise ParityError("switching rate too fast for the sampling period")
    rng = np.random.default_rng(seed)
    flips = rng.poisson(gamma_p * dt_rep, size=n_samples - 1)
    hidden = np.concatenate([[rng.random() < 0.5], np.zeros(n_samples - 1, dtype=bool)])
    hidden[1:] = (np.cumsum(flips) + hidden[0]) % 2 == 1
    wrong = rng.random(n_samples) >= 0.5 * (1 + fidelity)
    return ParityTrace(hidden ^ wrong, dt_rep, gamma_p, fidelity, hidden)


def lorentzian(f, gamma_p, fidelity, dt_rep):
    return 4 * fidelity ** 2 * gamma_p / ((2 * gamma_p) ** 2 + (2 * np.pi * f) ** 2) \
        + (1 - fidelity ** 2) * dt_rep


def parity_psd(traces, n_segments=N_SEGMENTS):
    """Two-sided segment-averaged periodogram of +-1 parity, averaged over traces.

    Returns (f_Hz, S) for f > 0 only; the DC bin is dropped.
    """
    if isinstance(traces, ParityTrace):
        traces = [traces]
    dt = traces[0].dt_rep
    n = len(traces[0])
    if n < 1000:
        raise ParityError("trace too short for a spectral estimate")
    if any(t.dt_rep != dt or len(t) != n for t in traces):
        raise ParityError("traces must share length and sampling period")
    acc = 0.0
    for t in traces:
        f, s = welch(2.0 * t.samples - 1.0, fs=1.0 / dt, window="boxcar", nperseg=n // n_segments,
                     noverlap=0, return_onesided=False, scaling="density")
        acc = acc + s
    keep = f > 0
    order = np.argsort(f[keep])
    return f[keep][order], (acc / len(traces))[keep][order]


def expected_periodogram(f, gamma_p, fidelity, dt_rep, n_seg):
    """Mean periodogram of an ``n_seg``-sample record of the sampled telegraph process.

    The autocorrelation at lag m is F^2 rho^|m| (rho = exp(-2 Gamma dt)) plus
    (1 - F^2) at m = 0; a finite record weights lags by (1 - |m|/n).  For
    long records and slow switching this tends to ``lorentzian``.
    """
    rho = np.exp(-2.0 * gamma_p * dt_rep)
    w = rho * np.exp(-2j * np.pi * np.asarray(f, dtype=float) * dt_rep)
    n = n_seg
    wn1 = w ** (n - 1)
    s1 = w * (1 - wn1) / (1 - w)
    s2 = w * (1 - n * wn1 + (n - 1) * wn1 * w) / (1 - w) ** 2
    k = 1.0 + 2.0 * np.real(s1 - s2 / n)
    return dt_rep * ((1 - fidelity ** 2) + fidelity ** 2 * k)


@dataclass
class LorentzianFit:
    gamma_p: float
    fidelity: float
    covariance: np.ndarray
    residual_norm: float

    def psd(self, f, dt_rep):
        return lorentzian(np.asarray(f), self.gamma_p, self.fidelity, dt_rep)


class LorentzianPSD(RegressorMixin, BaseEstimator):
    """Weighted least-squares Lorentzian-plus-floor fit of a parity PSD.

    Weights follow the model itself (a periodogram average has relative
    scatter independent of level), refreshed for a few iterations.  With
    ``n_seg`` set, the model is the expected periodogram of records of that
    length, which removes the finite-record bias of the corner frequency.
    """

    def __init__(self, dt_rep=0.01, n_seg=None, gamma0=None, fidelity0=0.8, n_iter=4):
        self.dt_rep = dt_rep
        self.n_seg = n_seg
        self.gamma0 = gamma0
        self.fidelity0 = fidelity0
        self.n_iter = n_iter

    def _model(self, f, gamma_p, fidelity):
        if self.n_seg:
            return expected_periodogram(f, gamma_p, fidelity, self.dt_rep, self.n_seg)
        return lorentzian(f, gamma_p, fidelity, self.dt_rep)

    def fit(self, X, y):
        f = np.ravel(np.asarray(X, dtype=float))
        s = np.asarray(y, dtype=float)
        dt = self.dt_rep
        model = self._model
        g0 = self.gamma0 if self.gamma0 is not None else _corner_guess(f, s, dt)
        p = np.array([g0, self.fidelity0])
        sigma = s
        try:
            for _ in range(self.n_iter):
                p, cov = curve_fit(model, f, s, p0=p, sigma=sigma, absolute_sigma=False,
                                   bounds=([1e-9, 0.0], [np.inf, 1.0]))
                sigma = model(f, *p)
        except (RuntimeError, ValueError) as exc:
            raise FitError(f"Lorentzian fit did not converge: {exc}", s - model(f, *p)) from exc
        resid = (s - sigma) / sigma
        if not np.all(np.isfinite(p)):
            raise FitError("Lorentzian fit produced non-finite parameters", resid)
        self.gamma_p_, self.fidelity_ = float(p[0]), float(p[1])
        self.covariance_ = cov
        self.residual_norm_ = float(np.linalg.norm(resid))
        return self

    def predict(self, X):
        return self._model(np.ravel(np.asarray(X, dtype=float)), self.gamma_p_, self.fidelity_)

    def result(self):
        return LorentzianFit(self.gamma_p_, self.fidelity_, self.covariance_, self.residual_norm_)


def _corner_guess(f, s, dt):
    # half-height of the excess over the high-frequency floor marks f = 2 Gamma / 2 pi
    floor = np.median(s[-max(3, s.size // 10):])
    excess = s - floor
    top = excess[0]
    if top <= 0:
        return 1.0 / (len(f) * dt)
    k = np.argmax(excess < 0.5 * top)
    return max(np.pi * f[k], 1e-6)


def psd_and_fit(traces, n_segments=N_SEGMENTS, finite_record=True):
    f, s = parity_psd(traces, n_segments)
    first = traces if isinstance(traces, ParityTrace) else traces[0]
    n_seg = len(first) // n_segments if finite_record else None
    return LorentzianPSD(dt_rep=first.dt_rep, n_seg=n_seg).fit(f, s).result()


# ---- coincidences ----

def digitize(samples, threshold=0.5):
    return np.asarray(samples, dtype=float) > threshold


def edge_windows(samples, window_samples):
    """Boolean per window: did the digitized trace change state inside it."""
    d = digitize(samples)
    edge = np.zeros(d.size, dtype=bool)
    edge[1:] = d[1:] != d[:-1]
    n_w = d.size // window_samples
    return edge[:n_w * window_samples].reshape(n_w, window_samples).any(axis=1)


@dataclass
class CoincidenceCounts:
    n_windows: int
    windows_a: int
    windows_b: int
    windows_ab: int


def coincident_edges(trace_a, trace_b, window_s=0.4, dt_rep=0.01):
    """Count fixed windows holding an edge in A, in B, and in both."""
    a = trace_a.samples if isinstance(trace_a, ParityTrace) else np.asarray(trace_a)
    b = trace_b.samples if isinstance(trace_b, ParityTrace) else np.asarray(trace_b)
    if a.size != b.size:
        raise ParityError("traces must have equal length")
    w = int(round(window_s / dt_rep))
    if w < 1:
        raise ParityError("window shorter than one sample")
    ea, eb = edge_windows(a, w), edge_windows(b, w)
    return CoincidenceCounts(ea.size, int(ea.sum()), int(eb.sum()), int((ea & eb).sum()))


def coincidence_forward(p_a, p_b, p_ab):
    """Observed per-window probabilities from underlying ones (odd switch counts only are seen)."""
    return 0.5 * (p_ab + p_a), 0.5 * (p_ab + p_b), 0.25 * (p_ab + p_a * p_b)


@dataclass
class Inversion:
    p_a: float
    p_b: float
    p_ab: float
    multiple: bool = False
    exact: bool = True


def _closest_feasible(a, b, B):
    # |x^2 + B x + C| is smallest at the vertex; keep x, 2a - x, 2b - x inside [0, 1]
    lo = max(0.0, 2 * a - 1, 2 * b - 1)
    hi = min(1.0, 2 * a, 2 * b)
    if lo > hi:
        raise InfeasibleError(f"single-trace rates {(a, b)} exceed one half")
    x = min(max(-0.5 * B, lo), hi)
    return Inversion(2 * a - x, 2 * b - x, x, False, False)


def coincidence_invert(p_a_obs, p_b_obs, p_ab_obs, strict=True):
    """Underlying (p_A, p_B, p_AB) from observed rates; smaller p_AB when two roots are feasible.

    Sampling noise can push measured rates just outside the model's range.
    With ``strict=False`` such input returns the feasible point that comes
    closest to reproducing it, flagged ``exact=False``; otherwise it raises.
    """
    a, b, c = float(p_a_obs), float(p_b_obs), float(p_ab_obs)
    B = 1.0 - 2.0 * (a + b)
    C = 4.0 * a * b - 4.0 * c
    disc = B * B - 4.0 * C
    if disc < -ROOT_TOL:
        if not strict:
            return _closest_feasible(a, b, B)
        raise InfeasibleError(f"no real solution for observed rates {(a, b, c)}")
    sq = np.sqrt(max(disc, 0.0))
    # numerically stable pair of roots
    q = -0.5 * (B + np.copysign(sq, B if B != 0 else 1.0))
    roots = [q, C / q] if q != 0 else [0.0, -B]
    feasible = []
    for x in sorted(set(roots)):
        pa, pb = 2 * a - x, 2 * b - x
        if all(-ROOT_TOL <= v <= 1 + ROOT_TOL for v in (x, pa, pb)):
            feasible.append((min(max(pa, 0.0), 1.0), min(max(pb, 0.0), 1.0), min(max(x, 0.0), 1.0)))
    if not feasible:
        if not strict:
            return _closest_feasible(a, b, B)
        raise InfeasibleError(f"observed rates {(a, b, c)} are inconsistent with the coincidence model")
    pa, pb, x = feasible[0]
    return Inversion(pa, pb, x, len(feasible) > 1)


@dataclass
class CoincidenceRates:
    window_s: float
    rate_a: float                # observed edge-window rates, 1/s
    rate_b: float
    rate_ab: float
    background_rate: float       # random two-fold coincidences, 1/s
    p_a: float
    p_b: float
    p_ab: float
    multiple_roots: bool = False
    exact: bool = True          # False when the rates had to be projected onto the model


def background_rate(rate_a, rate_b, window_s=0.4):
    return (rate_a * window_s) * (rate_b * window_s) / window_s


def coincidence_rates(trace_a, trace_b, window_s=0.4, dt_rep=0.01):
    n = coincident_edges(trace_a, trace_b, window_s, dt_rep)
    if n.n_windows == 0:
        raise ParityError("record shorter than one window")
    obs = np.array([n.windows_a, n.windows_b, n.windows_ab]) / n.n_windows
    inv = coincidence_invert(*obs, strict=False)
    ra, rb, rab = obs / window_s
    return CoincidenceRates(window_s, ra, rb, rab, background_rate(ra, rb, window_s),
                            inv.p_a, inv.p_b, inv.p_ab, inv.multiple, inv.exact)
