"""Model predictions: single-pulse trade-offs, cycling, power grids, pulse trains.

Single-pulse predictions (excitation, red branching, cycling) use only the
optically driven rates by default (``relaxation=False``): spontaneous decay
is negligible over a 100 ps pulse, and this is the model the quoted
single-pulse figures of merit refer to.  Powers are expressed as pulse areas
(rate x pulse duration), which do not depend on the setup calibration;
``SweepResult.power_uW`` converts them with ``g_cal``/``r_cal``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from . import model
from .datasets import DEFAULT_DELAY_NS, Row
from .model import E0, E1, EZ, G0, G1, GZ, N_LEVELS
from .observables import PropagatorCache, pair_switching
from .params import RateParameters

SATURATING_AREA = 1000.0
GOLDEN_TOL = 1e-6
COVARIANCE_NAMES = ("a", "b", "c", "d", "e", "f")


@dataclass
class SweepResult:
    grid: dict[str, np.ndarray]
    channels: dict[str, np.ndarray]
    optimum: dict[str, float] = field(default_factory=dict)
    bands: dict[str, np.ndarray] = field(default_factory=dict)
    power_uW: dict[str, np.ndarray] = field(default_factory=dict)

    def to_csv(self, path) -> None:
        cols = dict(self.grid)
        cols.update({f"{k}_uW": v for k, v in self.power_uW.items()})
        cols.update(self.channels)
        cols.update({f"{k}_err": v for k, v in self.bands.items()})
        shape = next(iter(self.channels.values())).shape
        if len(shape) == 2:
            gx, gy = list(self.grid)
            X, Y = np.meshgrid(self.grid[gx], self.grid[gy], indexing="ij")
            cols[gx], cols[gy] = X, Y
            for k in self.power_uW:
                cols[f"{k}_uW"] = np.broadcast_to(
                    self.power_uW[k][:, None] if k == gx else self.power_uW[k][None, :], shape)
        flat = {k: np.asarray(v).ravel() for k, v in cols.items()}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(flat))
            for i in range(len(next(iter(flat.values())))):
                w.writerow([format(float(flat[k][i]), ".17g") for k in flat])


# error propagation

def parameter_covariance(params: RateParameters, names: Sequence[str] = COVARIANCE_NAMES) -> np.ndarray:
    """Diagonal covariance from the 1-sigma errors carried by ``params``."""
    return np.diag([params.errors.get(n, 0.0) ** 2 for n in names])


def linearized_error(fn: Callable[[RateParameters], np.ndarray], params: RateParameters,
                     names: Sequence[str], cov: np.ndarray) -> np.ndarray:
    """Standard error of ``fn(params)`` by first-order propagation of ``cov``."""
    grads = []
    for n in names:
        v = getattr(params, n)
        h = 1e-5 * max(abs(v), 1e-3)
        lo = max(v - h, 0.0)
        up = fn(params.replace(**{n: v + h}))
        dn = fn(params.replace(**{n: lo}))
        grads.append((np.asarray(up) - np.asarray(dn)) / (v + h - lo))
    G = np.array(grads)
    var = np.einsum("i...,ij,j...->...", G, cov, G)
    return np.sqrt(np.maximum(var, 0.0))


def bootstrap_error(fn: Callable[[RateParameters], np.ndarray], params: RateParameters,
                    names: Sequence[str], cov: np.ndarray, n_samples: int = 200,
                    seed: int = 0) -> np.ndarray:
    """Standard deviation of ``fn`` over parametric draws of the named parameters."""
    rng = np.random.default_rng(seed)
    centre = np.array([getattr(params, n) for n in names])
    draws = rng.multivariate_normal(centre, cov, size=n_samples)
    out = []
    for d in draws:
        try:
            out.append(fn(params.replace(**dict(zip(names, np.maximum(d, 0.0))))))
        except ValueError:
            continue
    return np.std(np.array(out), axis=0, ddof=1)


# golden-section refinement

def golden_max(f: Callable[[float], float], lo: float, hi: float, tol: float = GOLDEN_TOL):
    inv = (math.sqrt(5) - 1) / 2
    c, d = hi - inv * (hi - lo), lo + inv * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc >= fd:
            hi, d, fd = d, c, fc
            c = hi - inv * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv * (hi - lo)
            fd = f(d)
    x = 0.5 * (lo + hi)
    return x, f(x)


def _refine_1d(f, grid: np.ndarray, values: np.ndarray):
    k = int(np.argmax(values))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]
    x, fx = golden_max(f, lo, hi)
    if fx < values[k]:
        return float(grid[k]), float(values[k])
    return float(x), float(fx)


# single pulses

def _pulse_propagator(params, kind, area, relaxation):
    T = params.pulse_ns
    L = model.build_rate_matrix(params.replace(g_cal=1.0, r_cal=1.0), kind, area / T, relaxation)
    return expm(L * T)


def _excitation(params, area, relaxation):
    p = _pulse_propagator(params, "green", area, relaxation) @ model.pure_state("g_minus_0")
    return p[E0] + p[E1], model.nv_zero_population(p)


def green_excitation_sweep(params: RateParameters, areas, relaxation: bool = False,
                           covariance: np.ndarray | None = None,
                           cov_names: Sequence[str] = COVARIANCE_NAMES) -> SweepResult:
    """NV- excited vs ionized probability after one green pulse from g-."""
    areas = np.asarray(areas, dtype=float)
    if np.any(areas < 0):
        raise ValueError("pulse areas must be non-negative")

    def evaluate(p):
        return np.array([_excitation(p, x, relaxation) for x in areas]).T

    exc, ion = evaluate(params)
    x_opt, e_opt = _refine_1d(lambda x: _excitation(params, x, relaxation)[0], areas, exc)
    res = SweepResult({"green_area": areas}, {"excited": exc, "ionized": ion},
                      {"green_area": x_opt, "excited": e_opt,
                       "green_uW": float(params.green_power_for_area(x_opt))},
                      power_uW={"green_area": params.green_power_for_area(areas)})
    if covariance is not None:
        bands = linearized_error(evaluate, params, cov_names, covariance)
        res.bands = {"excited": bands[0], "ionized": bands[1]}
        res.optimum["excited_err"] = float(linearized_error(
            lambda p: max_excitation(p, relaxation), params, cov_names, covariance))
    return res


def max_excitation(params: RateParameters, relaxation: bool = False) -> float:
    grid = np.linspace(0.25, 12.0, 48)
    vals = np.array([_excitation(params, x, relaxation)[0] for x in grid])
    return _refine_1d(lambda x: _excitation(params, x, relaxation)[0], grid, vals)[1]


def _branching(params, area, relaxation):
    p = _pulse_propagator(params, "red", area, relaxation) @ model.pure_state("e_minus_0")
    return p[G0] + p[G1], model.nv_zero_population(p)


def red_branching_sweep(params: RateParameters, areas, relaxation: bool = False,
                        covariance: np.ndarray | None = None,
                        cov_names: Sequence[str] = COVARIANCE_NAMES) -> SweepResult:
    """Stimulated return to g- vs ionization after one red pulse from e-."""
    areas = np.asarray(areas, dtype=float)
    if np.any(areas < 0):
        raise ValueError("pulse areas must be non-negative")

    def evaluate(p):
        return np.array([_branching(p, y, relaxation) for y in areas]).T

    stim, ion = evaluate(params)
    sat_stim, sat_ion = _branching(params, SATURATING_AREA, relaxation)
    res = SweepResult({"red_area": areas}, {"stimulated": stim, "ionized": ion},
                      {"saturated_stimulated": float(sat_stim), "saturated_ionized": float(sat_ion)},
                      power_uW={"red_area": params.red_power_for_area(areas)})
    if covariance is not None:
        bands = linearized_error(evaluate, params, cov_names, covariance)
        res.bands = {"stimulated": bands[0], "ionized": bands[1]}
        sat_err = linearized_error(lambda p: np.array(_branching(p, SATURATING_AREA, relaxation)),
                                   params, cov_names, covariance)
        res.optimum["saturated_stimulated_err"] = float(sat_err[0])
        res.optimum["saturated_ionized_err"] = float(sat_err[1])
    return res


# cycling

CYCLED = N_LEVELS  # extra absorbing level collecting stimulated returns


def _absorbing(L: np.ndarray) -> np.ndarray:
    """Embed in 8 levels and make NV0 absorbing (no return flow)."""
    M = np.zeros((N_LEVELS + 1, N_LEVELS + 1))
    M[:N_LEVELS, :N_LEVELS] = L
    M[:, GZ] = 0.0
    M[:, EZ] = 0.0
    return M


def _cycling_propagators(params, green_area, red_area, delay_ns, relaxation):
    T = params.pulse_ns
    unit = params.replace(g_cal=1.0, r_cal=1.0)
    Lg = _absorbing(model.build_rate_matrix(unit, "green", green_area / T, relaxation))
    Ld = _absorbing(model.build_rate_matrix(unit, "dark", 0.0, relaxation))
    Lr = _absorbing(model.build_rate_matrix(unit, "red", red_area / T, relaxation))
    R = red_area / T
    for g, e in ((G0, E0), (G1, E1)):
        Lr[g, e] -= R
        Lr[CYCLED, e] += R
    return expm(Lg * T), expm(Ld * delay_ns), expm(Lr * T)


def cycling_value(params: RateParameters, green_area: float, red_area: float,
                  delay_ns: float = DEFAULT_DELAY_NS, relaxation: bool = False) -> float:
    """Probability of g- -> e- (green) -> g- (red stimulated emission) without leaving NV-."""
    Mg, Md, Mr = _cycling_propagators(params, green_area, red_area, delay_ns, relaxation)
    p = np.zeros(N_LEVELS + 1)
    p[G0] = 1.0
    return float((Mr @ (Md @ (Mg @ p)))[CYCLED])


def cycling_probability(params: RateParameters, green_areas, red_areas,
                        delay_ns: float = DEFAULT_DELAY_NS, relaxation: bool = False,
                        covariance: np.ndarray | None = None,
                        cov_names: Sequence[str] = COVARIANCE_NAMES) -> SweepResult:
    """Cycling probability over a (green area, red area) grid with refined optimum.

    Leaving NV- is treated as absorbing, so ionization followed by
    recombination never counts as a completed cycle.
    """
    ga = np.asarray(green_areas, dtype=float)
    ra = np.asarray(red_areas, dtype=float)
    if np.any(ga < 0) or np.any(ra < 0):
        raise ValueError("pulse areas must be non-negative")
    f = lambda x, y: cycling_value(params, x, y, delay_ns, relaxation)
    vals = np.array([[f(x, y) for y in ra] for x in ga])
    i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
    x, y, best = float(ga[i]), float(ra[j]), float(vals[i, j])
    bounds_x = (ga[max(i - 1, 0)], ga[min(i + 1, len(ga) - 1)])
    bounds_y = (ra[max(j - 1, 0)], ra[min(j + 1, len(ra) - 1)])
    for _ in range(3):  # alternating golden-section refinement inside the bracket
        xn, vx = golden_max(lambda u: f(u, y), *bounds_x)
        if vx > best:
            x, best = float(xn), vx
        yn, vy = golden_max(lambda v: f(x, v), *bounds_y)
        if vy > best:
            y, best = float(yn), vy
    res = SweepResult({"green_area": ga, "red_area": ra}, {"cycling": vals},
                      {"green_area": x, "red_area": y, "cycling": best,
                       "green_uW": float(params.green_power_for_area(x)),
                       "red_uW": float(params.red_power_for_area(y))},
                      power_uW={"green_area": params.green_power_for_area(ga),
                                "red_area": params.red_power_for_area(ra)})
    if covariance is not None:
        res.optimum["cycling_err"] = float(linearized_error(
            lambda p: optimal_cycling(p, y, delay_ns, relaxation), params, cov_names, covariance))
    return res


def optimal_cycling(params: RateParameters, red_area: float, delay_ns: float = DEFAULT_DELAY_NS,
                    relaxation: bool = False) -> float:
    """Best cycling probability over green area at a fixed red area."""
    grid = np.linspace(0.25, 12.0, 48)
    f = lambda x: cycling_value(params, x, red_area, delay_ns, relaxation)
    return _refine_1d(f, grid, np.array([f(x) for x in grid]))[1]


# spin polarization through an optimized pair

def polarization_pipeline(params: RateParameters, nv_minus: float, polarization: float,
                          green_area: float | None = None, red_area: float = SATURATING_AREA,
                          delay_ns: float = DEFAULT_DELAY_NS) -> tuple[float, float]:
    """Final (NV- fraction, m_s=0 fraction) after a green-then-red pair.

    Without an explicit ``green_area`` the cycling-optimal area is used.  The
    pair is run on the seven-level model with relaxation and spin tracking.
    """
    for name, v in (("nv_minus", nv_minus), ("polarization", polarization)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    if green_area is None:
        grid = np.linspace(0.25, 12.0, 48)
        f = lambda x: cycling_value(params, x, red_area, delay_ns)
        green_area = _refine_1d(f, grid, np.array([f(x) for x in grid]))[0]
    seq = model.pulse_pair(params.green_power_for_area(green_area),
                           params.red_power_for_area(red_area), delay_ns * 1e3, params.pulse_width)
    p = model.final_state(model.ground_state(nv_minus, polarization), seq, params)
    return model.nv_minus_population(p), model.spin_polarization(p)


# green/red power grid of red-induced switching

def red_induced_switching_grid(params: RateParameters, green_powers, red_powers,
                               delay_ns: float = DEFAULT_DELAY_NS) -> SweepResult:
    """Red-induced increase in ionization and recombination, per (green, red) power in uW."""
    gp = np.asarray(green_powers, dtype=float)
    rp = np.asarray(red_powers, dtype=float)
    cache = PropagatorCache(params)
    out = {"ionization": np.zeros((len(gp), len(rp))), "recombination": np.zeros((len(gp), len(rp)))}
    for i, g in enumerate(gp):
        for channel, ci in (("ionization", 1.0), ("recombination", 0.0)):
            base = pair_switching(params, Row(g, 0.0, delay_ns, 0, ci), cache, with_red=False)
            for j, r in enumerate(rp):
                out[channel][i, j] = pair_switching(params, Row(g, r, delay_ns, 0, ci), cache) - base
    return SweepResult({"green_uW": gp, "red_uW": rp}, out)


# pulse trains

@dataclass
class TrainResult:
    times_us: np.ndarray
    nv_minus: np.ndarray
    fixed_point: np.ndarray
    fixed_point_nv_minus: float


def period_map(params: RateParameters, green_power: float, red_power: float = 0.0,
               period_ns: float = 1000.0, delay_ns: float = DEFAULT_DELAY_NS) -> np.ndarray:
    T = params.pulse_ns
    if red_power > 0:
        seq = model.pulse_pair(green_power, red_power, delay_ns * 1e3, params.pulse_width)
        rest = period_ns - (2 * T + delay_ns)
    else:
        seq = model.PulseSequence([model.Segment("green", params.pulse_width, green_power)])
        rest = period_ns - T
    if rest < 0:
        raise ValueError("repetition period shorter than the pulse sequence")
    return model.sequence_propagator(params, seq + model.PulseSequence([model.Segment("dark", rest * 1e3)]))


def steady_state_train(params: RateParameters, green_power: float, red_power: float = 0.0,
                       duration_us: float = 150.0, period_ns: float = 1000.0,
                       delay_ns: float = DEFAULT_DELAY_NS,
                       initial: np.ndarray | None = None) -> TrainResult:
    """NV- population after each period of a repeated pulse (pair) train."""
    M = period_map(params, green_power, red_power, period_ns, delay_ns)
    p = model.ground_state(0.7, params.spin_polarization) if initial is None else np.asarray(initial, float)
    n = int(round(duration_us * 1e3 / period_ns))
    trace = np.empty(n + 1)
    trace[0] = model.nv_minus_population(p)
    for k in range(n):
        p = M @ p
        trace[k + 1] = model.nv_minus_population(p)
    fp = fixed_point(M)
    return TrainResult(np.arange(n + 1) * period_ns * 1e-3, trace, fp, model.nv_minus_population(fp))


def fixed_point(M: np.ndarray) -> np.ndarray:
    """Stationary populations of a period map (eigenvector for eigenvalue 1)."""
    w, V = np.linalg.eig(M)
    k = int(np.argmin(np.abs(w - 1.0)))
    v = np.real(V[:, k])
    return v / v.sum()
