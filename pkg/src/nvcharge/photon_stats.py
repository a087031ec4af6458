"""Charge readout statistics under continuous yellow illumination.

Covers the photon count distribution of a blinking two-state emitter, the
maximum-likelihood fit of its switching and emission rates, threshold
selection, readout/initialization fidelities, and the inversion of two
successive readouts into ionization (P_I) and recombination (P_R)
probabilities.

P_I and P_R come from solving the forward equations of the readout
probability tree directly.  A closed form circulating for P_I reduces to
Q- - 1 in the perfect-fidelity limit, while the tree gives 1 - Q-, so no
closed form is transcribed here.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.integrate import quad_vec
from scipy.optimize import minimize
from scipy.special import gammaln, i0e, i1e, xlogy
from scipy.stats import chi2

QUAD_EPSABS = 1e-12
SERIES_TOL = 1e-14
TAIL_TOL = 1e-10


class TruncationError(ValueError):
    """Count support too small to hold the distribution."""


class NonIdentifiableError(ValueError):
    pass


class SingularSystemError(ValueError):
    pass


@dataclass(frozen=True)
class YellowRates:
    Gamma_minus: float  # ionization rate, Hz
    Gamma_zero: float  # recombination rate, Hz
    mu_minus: float  # NV- photon rate, Hz
    mu_zero: float  # NV0 photon rate, Hz

    def __post_init__(self):
        for name in ("Gamma_minus", "Gamma_zero", "mu_minus", "mu_zero"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.mu_minus < self.mu_zero:
            raise ValueError("mu_minus must not be below mu_zero")

    @property
    def steady_state_nv_minus(self) -> float:
        total = self.Gamma_zero + self.Gamma_minus
        if total == 0:
            raise ValueError("steady state undefined without switching")
        return self.Gamma_zero / total

    def swapped(self) -> "YellowRates":
        """Exchange the roles of the two charge states (no contrast check)."""
        obj = object.__new__(YellowRates)
        for name, value in (("Gamma_minus", self.Gamma_zero), ("Gamma_zero", self.Gamma_minus),
                            ("mu_minus", self.mu_zero), ("mu_zero", self.mu_minus)):
            object.__setattr__(obj, name, value)
        return obj


@dataclass(frozen=True)
class CountDistribution:
    probabilities: np.ndarray  # P(n), n = 0..n_max
    t_R: float
    N_minus: float
    given_minus: np.ndarray  # P(n | NV- at start)
    given_zero: np.ndarray  # P(n | NV0 at start)

    @property
    def n_max(self) -> int:
        return len(self.probabilities) - 1

    @property
    def counts(self) -> np.ndarray:
        return np.arange(len(self.probabilities))

    def mean(self) -> float:
        return float(np.dot(self.counts, self.probabilities))


def default_n_max(rates: YellowRates, t_R: float) -> int:
    x = rates.mu_minus * t_R
    return max(int(math.ceil(x + 10.0 * math.sqrt(x))), 20)


def _poisson(n: np.ndarray, x: float) -> np.ndarray:
    return np.exp(xlogy(n, x) - x - gammaln(n + 1.0))


def _switch_sums_series(ga: float, gb: float, tau: float, t: float) -> tuple[float, float]:
    """Even and odd switching sums by direct summation over m."""
    z = ga * gb * tau * (t - tau)
    # even: ga gb tau * sum_{m>=1} m z^(m-1) / (m!)^2 ; odd: ga * sum_{k>=0} z^k / (k!)^2
    even_sum, odd_sum = 0.0, 0.0
    term_even, term_odd = 1.0, 1.0  # m=1 and k=0 terms
    m = 1
    while True:
        even_sum += term_even
        odd_sum += term_odd
        nxt_even = term_even * z * (m + 1) / (m * (m + 1) ** 2)
        nxt_odd = term_odd * z / (m * m)
        if max(ga * gb * tau * nxt_even, ga * nxt_odd) < SERIES_TOL:
            break
        term_even, term_odd = nxt_even, nxt_odd
        m += 1
    return ga * gb * tau * even_sum, ga * odd_sum


def _switch_sums_bessel(ga: float, gb: float, tau: float, t: float) -> tuple[float, float]:
    z = ga * gb * tau * (t - tau)
    if z <= 0:
        return ga * gb * tau, ga
    s = 2.0 * math.sqrt(z)
    scale = math.exp(s)
    return ga * gb * tau * i1e(s) * scale / math.sqrt(z), ga * i0e(s) * scale


def _conditional_parts(n: np.ndarray, ga: float, gb: float, ma: float, mb: float, t: float,
                       method: str) -> tuple[np.ndarray, np.ndarray]:
    """P(n, even switches | start a) and P(n, odd switches | start a)."""
    sums = _switch_sums_series if method == "series" else _switch_sums_bessel
    if ga == 0:
        return _poisson(n, ma * t), np.zeros_like(n, dtype=float)

    def integrand(tau):
        weight = math.exp(-ga * tau - gb * (t - tau))
        even, odd = sums(ga, gb, tau, t)
        # odd paths end in the other state, with time tau in the start state
        return np.concatenate([weight * even * _poisson(n, ma * tau + mb * (t - tau)),
                               weight * odd * _poisson(n, ma * tau + mb * (t - tau))])

    res, _ = quad_vec(integrand, 0.0, t, epsabs=QUAD_EPSABS, epsrel=1e-10)
    k = len(n)
    even = res[:k] + math.exp(-ga * t) * _poisson(n, ma * t)
    return even, res[k:]


def conditional_parts(rates: YellowRates, t_R: float, start: str, n_max: int,
                      method: str = "series") -> tuple[np.ndarray, np.ndarray]:
    """Joint count/final-state distribution for a readout starting in ``start``.

    Returns ``(same, other)`` where ``same[n]`` is the probability of n counts
    and ending in the starting charge state, ``other[n]`` of ending in the
    opposite one.
    """
    if method not in ("series", "bessel"):
        raise ValueError(f"unknown method {method!r}")
    n = np.arange(n_max + 1, dtype=float)
    if start == "minus":
        return _conditional_parts(n, rates.Gamma_minus, rates.Gamma_zero, rates.mu_minus,
                                  rates.mu_zero, t_R, method)
    if start == "zero":
        return _conditional_parts(n, rates.Gamma_zero, rates.Gamma_minus, rates.mu_zero,
                                  rates.mu_minus, t_R, method)
    raise ValueError(f"start must be 'minus' or 'zero', got {start!r}")


def count_distribution(rates: YellowRates, t_R: float, N_minus: float,
                       n_max: int | None = None, method: str = "series") -> CountDistribution:
    """Photon count distribution of a readout of duration ``t_R`` seconds."""
    if not t_R > 0:
        raise ValueError("t_R must be positive")
    if not 0.0 <= N_minus <= 1.0:
        raise ValueError("N_minus must lie in [0, 1]")
    if n_max is None:
        n_max = default_n_max(rates, t_R)
    pm = sum(conditional_parts(rates, t_R, "minus", n_max, method))
    pz = sum(conditional_parts(rates, t_R, "zero", n_max, method))
    for label, p in (("NV-", pm), ("NV0", pz)):
        tail = 1.0 - p.sum()
        if tail > TAIL_TOL:
            raise TruncationError(f"{label} tail mass {tail:.3g} beyond n_max={n_max}")
    pm, pz = np.clip(pm, 0.0, None), np.clip(pz, 0.0, None)
    return CountDistribution(N_minus * pm + (1.0 - N_minus) * pz, t_R, N_minus, pm, pz)


# maximum-likelihood fit

@dataclass(frozen=True)
class YellowFit:
    rates: YellowRates
    N_minus: float
    covariance: np.ndarray  # over `names`
    names: tuple[str, ...]
    nll: float
    n_bins: int

    @property
    def errors(self) -> dict[str, float]:
        return dict(zip(self.names, np.sqrt(np.diag(self.covariance))))


_RATE_NAMES = ("Gamma_minus", "Gamma_zero", "mu_minus", "mu_zero")


def _initial_guess(hist: np.ndarray, t_R: float) -> np.ndarray:
    n = np.arange(len(hist))
    total = hist.sum()
    mean = np.dot(n, hist) / total
    low, high = n <= mean, n > mean
    lo_mean = max(np.dot(n[low], hist[low]) / max(hist[low].sum(), 1), 0.1)
    hi_mean = max(np.dot(n[high], hist[high]) / max(hist[high].sum(), 1), lo_mean + 1.0)
    frac = hist[high].sum() / total
    return np.array([1.0 / t_R, 1.0 / t_R, hi_mean / t_R, lo_mean / t_R, min(max(frac, 0.05), 0.95)])


def _model_probs(theta: np.ndarray, t_R: float, n_max: int, steady_state: bool) -> np.ndarray:
    g_m, g_z, mu_m, mu_z = theta[:4]
    rates = YellowRates(g_m, g_z, max(mu_m, mu_z), min(mu_m, mu_z))
    nm = rates.steady_state_nv_minus if steady_state else theta[4]
    pm = sum(conditional_parts(rates, t_R, "minus", n_max))
    pz = sum(conditional_parts(rates, t_R, "zero", n_max))
    return nm * pm + (1.0 - nm) * pz


def fit_yellow_rates(histogram, t_R: float, steady_state: bool = False,
                     initial: Mapping[str, float] | None = None, maxiter: int = 4000) -> YellowFit:
    """Multinomial maximum-likelihood fit of the yellow switching/emission rates.

    ``histogram[n]`` is the number of bins with n counts.  The optimizer works
    on square-root transformed rates so a rate of exactly zero stays
    reachable; N_minus goes through a logistic transform.  The covariance is
    the inverse expected Fisher information of the multinomial model.
    """
    hist = np.asarray(histogram, dtype=float)
    total = hist.sum()
    if total <= 0:
        raise ValueError("empty histogram")
    guess = _initial_guess(hist, t_R)
    if initial:
        for i, name in enumerate(_RATE_NAMES + ("N_minus",)):
            if name in initial:
                guess[i] = initial[name]
    if guess[0] > 0 and t_R < 1.0 / guess[0]:
        warnings.warn("readout bin shorter than 1/Gamma_minus; ionization rate poorly constrained")
    n_obs_max = len(hist) - 1
    n_max = max(n_obs_max, int(math.ceil(guess[2] * t_R + 10 * math.sqrt(guess[2] * t_R))))
    counts = np.zeros(n_max + 1)
    counts[:len(hist)] = hist

    def unpack(u):
        theta = np.full(5, np.nan)
        theta[:4] = u[:4] ** 2
        if not steady_state:
            theta[4] = 1.0 / (1.0 + math.exp(-u[4]))
        return theta

    def nll(u):
        theta = unpack(u)
        if steady_state and theta[0] + theta[1] == 0:
            return np.inf
        try:
            p = _model_probs(theta, t_R, n_max, steady_state)
        except ValueError:
            return np.inf
        return -float(np.sum(xlogy(counts, np.clip(p, 1e-300, None))))

    u0 = np.sqrt(guess[:4])
    if not steady_state:
        u0 = np.append(u0, math.log(guess[4] / (1.0 - guess[4])))
    res = minimize(nll, u0, method="Nelder-Mead",
                   options=dict(maxiter=maxiter, maxfev=maxiter * 2, xatol=1e-7, fatol=1e-9,
                                adaptive=True))
    theta = unpack(res.x)
    mu_m, mu_z = max(theta[2], theta[3]), min(theta[2], theta[3])
    if abs(mu_m - mu_z) <= 1e-3 * max(mu_m, 1e-300) or _poisson_explains(counts, res.fun, 4):
        raise NonIdentifiableError("NV- and NV0 photon rates coincide; switching rates not identifiable")
    theta[2], theta[3] = mu_m, mu_z

    names = _RATE_NAMES if steady_state else _RATE_NAMES + ("N_minus",)
    cov = _fisher_covariance(theta, t_R, n_max, steady_state, total)
    rates = YellowRates(*theta[:4])
    nm = rates.steady_state_nv_minus if steady_state else float(theta[4])
    return YellowFit(rates, nm, cov, names, float(res.fun), int(total))


def _poisson_explains(counts: np.ndarray, nll: float, extra_dof: int, alpha: float = 1e-3) -> bool:
    """True when a single Poisson fits as well as the two-state model (likelihood-ratio test)."""
    n = np.arange(len(counts))
    lam = np.dot(n, counts) / counts.sum()
    nll_poisson = -float(np.sum(counts * _log_poisson(n, lam)))
    return 2.0 * (nll_poisson - nll) < chi2.isf(alpha, extra_dof)


def _log_poisson(n: np.ndarray, x: float) -> np.ndarray:
    return xlogy(n, x) - x - gammaln(n + 1.0)


def _fisher_covariance(theta, t_R, n_max, steady_state, total) -> np.ndarray:
    k = 4 if steady_state else 5
    p0 = _model_probs(theta, t_R, n_max, steady_state)
    grads = []
    for i in range(k):
        h = 1e-5 * max(abs(theta[i]), 1e-3 if i < 4 else 1e-4)
        lo = theta.copy()
        hi = theta.copy()
        lo[i] = max(theta[i] - h, 0.0)
        hi[i] = theta[i] + h
        if i == 4:
            hi[i] = min(hi[i], 1.0)
        grads.append((_model_probs(hi, t_R, n_max, steady_state)
                      - _model_probs(lo, t_R, n_max, steady_state)) / (hi[i] - lo[i]))
    J = np.array(grads)
    mask = p0 > 1e-300
    info = total * (J[:, mask] / p0[mask]) @ J[:, mask].T
    return np.linalg.pinv(info)


# threshold and fidelities

@dataclass(frozen=True)
class ReadoutCalibration:
    threshold: int
    R0: float
    Rm: float
    I0: float = 1.0
    Im: float = 1.0
    errors: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        for name in ("R0", "Rm", "I0", "Im"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.R0 + self.Rm - 1.0 <= 0:
            raise ValueError("readout is uninformative: R0 + Rm - 1 <= 0")

    def error(self, name: str) -> float:
        return float(self.errors.get(name, 0.0))

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "R0": self.R0, "Rm": self.Rm, "I0": self.I0,
                "Im": self.Im, "errors": dict(self.errors)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ReadoutCalibration":
        return cls(int(data["threshold"]), float(data["R0"]), float(data["Rm"]),
                   float(data.get("I0", 1.0)), float(data.get("Im", 1.0)),
                   {k: float(v) for k, v in dict(data.get("errors", {})).items()})

    @classmethod
    def load(cls, path: str | Path) -> "ReadoutCalibration":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class ThresholdChoice:
    threshold: int
    R0: float
    Rm: float
    fidelity: float


def choose_threshold(dist_minus, dist_zero, N_minus: float) -> ThresholdChoice:
    """Threshold maximizing the population-weighted average readout fidelity.

    Counts at or below the threshold read as NV0.  Accepts CountDistribution
    objects or plain probability arrays on a common support.
    """
    pm = np.asarray(getattr(dist_minus, "given_minus", dist_minus), dtype=float)
    pz = np.asarray(getattr(dist_zero, "given_zero", dist_zero), dtype=float)
    if pm.shape != pz.shape:
        raise ValueError("distributions must share a common support")
    eps_minus = np.cumsum(pm)  # NV- read as NV0: n <= threshold
    eps_zero = pz.sum() - np.cumsum(pz)  # NV0 read as NV-: n > threshold
    fid = 1.0 - ((1.0 - N_minus) * eps_zero + N_minus * eps_minus) / 2.0
    best = int(np.argmax(fid))
    return ThresholdChoice(best, float(1.0 - eps_zero[best]), float(1.0 - eps_minus[best]),
                           float(fid[best]))


def initialization_fidelities(QZ0: float, QZm: float, R0: float, Rm: float) -> tuple[float, float]:
    """Initialization fidelities from repeat probabilities with nothing in between."""
    k = R0 + Rm - 1.0
    if k <= 0:
        raise ValueError("R0 + Rm - 1 must be positive")
    out = []
    for label, q, r_other in (("I0", QZ0, Rm), ("Im", QZm, R0)):
        value = (q + r_other - 1.0) / k
        if value < -0.05 or value > 1.05:
            raise ValueError(f"{label}={value:.4f} is far outside [0, 1]")
        if value < 0.0 or value > 1.0:
            warnings.warn(f"{label}={value:.4f} clamped to [0, 1]")
            value = min(max(value, 0.0), 1.0)
        out.append(value)
    return out[0], out[1]


def model_initialization_fidelities(rates: YellowRates, t_R: float, N_minus: float,
                                    threshold: int, n_max: int | None = None) -> tuple[float, float]:
    """I0, Im implied by the count model: P(final state | thresholded result)."""
    if n_max is None:
        n_max = default_n_max(rates, t_R)
    m_same, m_other = conditional_parts(rates, t_R, "minus", n_max)
    z_same, z_other = conditional_parts(rates, t_R, "zero", n_max)
    low = np.arange(n_max + 1) <= threshold
    end_minus = N_minus * m_same + (1 - N_minus) * z_other
    end_zero = N_minus * m_other + (1 - N_minus) * z_same
    i0 = end_zero[low].sum() / (end_zero[low].sum() + end_minus[low].sum())
    im = end_minus[~low].sum() / (end_zero[~low].sum() + end_minus[~low].sum())
    return float(i0), float(im)


def forward_switching(P_I: float, P_R: float, cal: ReadoutCalibration) -> tuple[float, float]:
    """Repeat probabilities (Q0, Q-) for given switching probabilities."""
    A, b = _forward_system(cal.I0, cal.Im, cal.R0, cal.Rm)
    q = A @ np.array([P_I, P_R]) + b
    return float(q[0]), float(q[1])


def _forward_system(i0, im, r0, rm):
    # (Q0, Q-) = A @ (P_I, P_R) + b, affine in the switching probabilities
    k = r0 + rm - 1.0
    A = np.array([[(1 - i0) * k, -i0 * k],
                  [-im * k, (1 - im) * k]])
    b = np.array([i0 * r0 + (1 - i0) * (1 - rm), im * rm + (1 - im) * (1 - r0)])
    return A, b


def _solve(q0, qm, i0, im, r0, rm) -> np.ndarray:
    A, b = _forward_system(i0, im, r0, rm)
    if abs(np.linalg.det(A)) < 1e-9:
        raise SingularSystemError("switching probabilities not recoverable: singular readout system")
    return np.linalg.solve(A, np.array([q0, qm]) - b)


@dataclass(frozen=True)
class SwitchingEstimate:
    P_I: float
    P_R: float
    P_I_err: float
    P_R_err: float
    covariance: np.ndarray


def extract_switching(Q0: float, Qm: float, cal: ReadoutCalibration,
                      Q0_err: float = 0.0, Qm_err: float = 0.0) -> SwitchingEstimate:
    """Solve for P_I and P_R; errors by first-order propagation of all inputs."""
    x = np.array([Q0, Qm, cal.I0, cal.Im, cal.R0, cal.Rm])
    sig = np.array([Q0_err, Qm_err, cal.error("I0"), cal.error("Im"), cal.error("R0"), cal.error("Rm")])
    p = _solve(*x)
    J = np.zeros((2, 6))
    for i in np.nonzero(sig)[0]:
        h = 1e-7
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        J[:, i] = (_solve(*up) - _solve(*dn)) / (2 * h)
    cov = J @ np.diag(sig ** 2) @ J.T
    return SwitchingEstimate(float(p[0]), float(p[1]), float(math.sqrt(cov[0, 0])),
                             float(math.sqrt(cov[1, 1])), cov)


# file formats

def read_histogram(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header != ["counts", "occurrences"]:
            bad = [h for h in header if h not in ("counts", "occurrences")]
            raise ValueError(f"bad histogram header, unexpected column(s): {bad or header}")
        rows = [(int(c), int(o)) for c, o in reader]
    if any(c < 0 or o < 0 for c, o in rows):
        raise ValueError("histogram counts and occurrences must be non-negative")
    hist = np.zeros(max(c for c, _ in rows) + 1, dtype=np.int64)
    for c, o in rows:
        hist[c] += o
    return hist


def write_histogram(hist, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["counts", "occurrences"])
        for c, o in enumerate(np.asarray(hist)):
            w.writerow([c, int(o)])
