"""Stochastic ground truth: exact jump-process sampling and synthetic data.

Random streams: every entry point takes an integer ``seed`` and builds a
``numpy.random.SeedSequence`` from it.  Work is split into fixed-size
batches and batch ``k`` draws from ``SeedSequence(seed).spawn(n)[k]``, so the
output depends only on the seed and the batch size, never on how many
threads run the batches.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model
from .datasets import DEFAULT_DELAY_NS, Dataset, Row
from .model import EZ, E0, E1, G0, G1, GZ, N_LEVELS, PulseSequence, Segment
from .observables import (PropagatorCache, green_switching, pair_state, pair_switching,
                          predict_observable)
from .params import RateParameters
from .photon_stats import (ReadoutCalibration, YellowRates, choose_threshold, count_distribution,
                           extract_switching, initialization_fidelities)

BATCH = 100_000

# reference readout regime: 2 uW yellow, 4 ms pulses
REFERENCE_YELLOW = YellowRates(Gamma_minus=27.0, Gamma_zero=3.89, mu_minus=1870.0, mu_zero=48.87)


def _batches(n: int, seed: int, batch: int = BATCH):
    sizes = [batch] * (n // batch) + ([n % batch] if n % batch else [])
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    return [(size, np.random.default_rng(s)) for size, s in zip(sizes, seqs)]


def _run_batches(fn, n: int, seed: int, threads: int = 1, batch: int = BATCH):
    jobs = _batches(n, seed, batch)
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda job: fn(*job), jobs))
    return [fn(*job) for job in jobs]


# pulsed dynamics

@dataclass(frozen=True)
class JumpTrajectory:
    times: np.ndarray  # jump times in ns, starting with 0
    levels: np.ndarray  # level occupied from times[i] on
    photons: int = 0  # spontaneous radiative decays

    @property
    def final_level(self) -> int:
        return int(self.levels[-1])


def _channel_table(params: RateParameters, seg: Segment, relaxation: bool):
    """Per-level exit rates split into optical and spontaneous channels."""
    optical = model.build_rate_matrix(params, seg.kind, seg.power, relaxation=False)
    relax = (model.build_rate_matrix(params, "dark", 0.0, relaxation=True)
             if relaxation else np.zeros((N_LEVELS, N_LEVELS)))
    table = np.zeros((N_LEVELS, 2 * N_LEVELS))
    for src in range(N_LEVELS):
        for dst in range(N_LEVELS):
            if dst != src:
                table[src, dst] = optical[dst, src]
                table[src, N_LEVELS + dst] = relax[dst, src]
    return table


_RADIATIVE = {(E0, G0), (E1, G1), (EZ, GZ)}
_PI_MAP = np.array([G1, G0, E1, E0, model.S, GZ, EZ])


def _is_radiative(src: np.ndarray, column: np.ndarray) -> np.ndarray:
    spont = column >= N_LEVELS
    dst = column - N_LEVELS
    rad = np.zeros_like(spont)
    for s, d in _RADIATIVE:
        rad |= (src == s) & (dst == d)
    return spont & rad


def _advance(levels: np.ndarray, photons: np.ndarray, table: np.ndarray, duration: float,
             rng: np.random.Generator, record=None) -> None:
    """Gillespie direct method over one constant segment, in place.

    Waiting times that overrun the segment end are discarded; memorylessness
    makes restarting the clock at the boundary exact.
    """
    exit_rate = table.sum(axis=1)
    cum = np.cumsum(table, axis=1)
    t = np.zeros(len(levels))
    active = exit_rate[levels] > 0
    while np.any(active):
        idx = np.nonzero(active)[0]
        rate = exit_rate[levels[idx]]
        t[idx] += rng.exponential(1.0 / rate)
        done = t[idx] >= duration
        active[idx[done]] = False
        idx = idx[~done]
        if idx.size == 0:
            break
        u = rng.random(idx.size) * exit_rate[levels[idx]]
        col = (cum[levels[idx]] <= u[:, None]).sum(axis=1)
        col = np.minimum(col, 2 * N_LEVELS - 1)
        photons[idx] += _is_radiative(levels[idx], col)
        levels[idx] = col % N_LEVELS
        if record is not None:
            record(idx, t[idx], levels[idx])
        active[idx] = exit_rate[levels[idx]] > 0


def simulate_jump(seq: PulseSequence | Sequence[Segment], params: RateParameters,
                  initial: int | str, seed: int, relaxation: bool = True) -> JumpTrajectory:
    """One exact realization of the piecewise-constant jump process."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    start = model.LEVELS.index(initial) if isinstance(initial, str) else int(initial)
    levels = np.array([start])
    photons = np.zeros(1, dtype=np.int64)
    times, visited = [0.0], [start]
    offset = 0.0

    def record(idx, t, lv):
        times.append(offset + float(t[0]))
        visited.append(int(lv[0]))

    for seg in seq:
        if seg.kind == "mw_pi":
            flipped = int(_PI_MAP[levels[0]])
            if flipped != levels[0]:
                levels[0] = flipped
                times.append(offset)
                visited.append(flipped)
            continue
        dt = seg.duration * 1e-3
        _advance(levels, photons, _channel_table(params, seg, relaxation), dt, rng, record)
        offset += dt
    times_arr = np.array(times)
    # pi pulses may add records at an existing time; keep the later level
    keep = np.append(np.diff(times_arr) > 0, True)
    return JumpTrajectory(times_arr[keep], np.array(visited)[keep], int(photons[0]))


def sample_final_levels(seq: PulseSequence | Sequence[Segment], params: RateParameters,
                        initial: int | str | np.ndarray, n: int, seed: int,
                        relaxation: bool = True, threads: int = 1) -> np.ndarray:
    """Final level of ``n`` independent trajectories.

    ``initial`` is a level (index or name) or a population vector to sample from.
    """
    tables = [None if s.kind == "mw_pi" else _channel_table(params, s, relaxation) for s in seq]

    def run(size, rng):
        if isinstance(initial, np.ndarray):
            levels = rng.choice(N_LEVELS, size=size, p=initial / initial.sum())
        else:
            start = model.LEVELS.index(initial) if isinstance(initial, str) else int(initial)
            levels = np.full(size, start)
        photons = np.zeros(size, dtype=np.int64)
        for seg, table in zip(seq, tables):
            if table is None:
                levels = _PI_MAP[levels]
            else:
                _advance(levels, photons, table, seg.duration * 1e-3, rng)
        return levels

    return np.concatenate(_run_batches(run, n, seed, threads))


# yellow readout

def _telegraph(start_minus: np.ndarray, rates: YellowRates, t_R: float, rng: np.random.Generator):
    """Counts and final charge (True = NV-) of readouts starting in ``start_minus``."""
    minus = start_minus.copy()
    time_minus = np.zeros(len(minus))
    time_zero = np.zeros(len(minus))
    remaining = np.full(len(minus), t_R)
    active = np.ones(len(minus), dtype=bool)
    while np.any(active):
        idx = np.nonzero(active)[0]
        rate = np.where(minus[idx], rates.Gamma_minus, rates.Gamma_zero)
        with np.errstate(divide="ignore"):
            wait = np.where(rate > 0, rng.exponential(1.0, idx.size) / np.where(rate > 0, rate, 1.0), np.inf)
        left = remaining[idx]
        switched = wait < left
        dwell = np.where(switched, wait, left)
        time_minus[idx] += np.where(minus[idx], dwell, 0.0)
        time_zero[idx] += np.where(minus[idx], 0.0, dwell)
        remaining[idx] = left - dwell
        minus[idx[switched]] = ~minus[idx[switched]]
        active[idx[~switched]] = False
    counts = rng.poisson(rates.mu_minus * time_minus + rates.mu_zero * time_zero)
    return counts, minus


def simulate_yellow_readout(rates: YellowRates, t_R: float, initial_Nminus: float,
                            n_trajectories: int, seed: int, threads: int = 1) -> np.ndarray:
    """Histogram of counts from ``n_trajectories`` readouts (index = count)."""
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")

    def run(size, rng):
        start = rng.random(size) < initial_Nminus
        counts, _ = _telegraph(start, rates, t_R, rng)
        return np.bincount(counts)

    parts = _run_batches(run, n_trajectories, seed, threads)
    hist = np.zeros(max(len(p) for p in parts), dtype=np.int64)
    for p in parts:
        hist[:len(p)] += p
    return hist


# synthetic datasets

@dataclass(frozen=True)
class ReadoutSetup:
    """Two-readout charge detection used to turn model probabilities into data."""
    rates: YellowRates = REFERENCE_YELLOW
    t_R: float = 4e-3
    prepared_nv_minus: float = 0.7  # charge mixture before the first readout
    calibration_shots: int = 1_000_000

    def readout_fidelities(self) -> tuple[int, float, float]:
        dist = count_distribution(self.rates, self.t_R, self.prepared_nv_minus)
        ch = choose_threshold(dist, dist, self.prepared_nv_minus)
        return ch.threshold, ch.R0, ch.Rm


@dataclass(frozen=True)
class ExperimentDescriptor:
    """What to measure: an observable kind and its independent-variable rows."""
    kind: str
    rows: tuple[Row, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def template(self) -> Dataset:
        return Dataset(self.kind, self.rows, dict(self.metadata))


def simulate_readout_pairs(p_switch_minus: float, p_switch_zero: float, setup: ReadoutSetup,
                           shots: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Photon counts of the readouts before and after an experiment, per shot."""
    start = rng.random(shots) < setup.prepared_nv_minus
    n1, mid = _telegraph(start, setup.rates, setup.t_R, rng)
    flip = np.where(mid, rng.random(shots) < p_switch_minus, rng.random(shots) < p_switch_zero)
    n2, _ = _telegraph(mid ^ flip, setup.rates, setup.t_R, rng)
    return n1, n2


def repeat_counts(n1: np.ndarray, n2: np.ndarray, threshold: int) -> tuple[int, int, int, int]:
    """(#first read NV0, #NV0 then NV0, #first read NV-, #NV- then NV-)."""
    m1, m2 = np.asarray(n1) > threshold, np.asarray(n2) > threshold
    return (int(np.sum(~m1)), int(np.sum(~m1 & ~m2)), int(np.sum(m1)), int(np.sum(m1 & m2)))


def _two_readouts(p_switch_minus: float, p_switch_zero: float, setup: ReadoutSetup,
                  threshold: int, shots: int, rng: np.random.Generator):
    return repeat_counts(*simulate_readout_pairs(p_switch_minus, p_switch_zero, setup, shots, rng),
                         threshold)


def q_statistics(counts: tuple[int, int, int, int]) -> tuple[float, float, float, float]:
    """Repeat probabilities (Q0, Q-) and their binomial errors."""
    n0, k0, nm, km = counts
    q0, qm = k0 / n0, km / nm
    return q0, qm, math.sqrt(q0 * (1 - q0) / n0), math.sqrt(qm * (1 - qm) / nm)


def calibrate_readout(setup: ReadoutSetup, rng: np.random.Generator) -> ReadoutCalibration:
    """Readout fidelities from the count model, initialization from simulated repeats."""
    threshold, r0, rm = setup.readout_fidelities()
    q0, qm, s0, sm = q_statistics(_two_readouts(0.0, 0.0, setup, threshold, setup.calibration_shots, rng))
    i0, im = initialization_fidelities(q0, qm, r0, rm)
    k = r0 + rm - 1.0
    return ReadoutCalibration(threshold, r0, rm, i0, im, {"I0": s0 / k, "Im": sm / k})


def measure_switching(p_i: float, p_r: float, setup: ReadoutSetup, cal: ReadoutCalibration,
                      shots: int, rng: np.random.Generator):
    """Simulated (P_I, P_R) estimate with statistical errors of this run only."""
    q0, qm, s0, sm = q_statistics(_two_readouts(p_i, p_r, setup, cal.threshold, shots, rng))
    stat_only = ReadoutCalibration(cal.threshold, cal.R0, cal.Rm, cal.I0, cal.Im)
    return extract_switching(q0, qm, stat_only, s0, sm)


def generate_dataset(descriptor: ExperimentDescriptor | Dataset, params: RateParameters, shots: int,
                     seed: int, setup: ReadoutSetup | None = None,
                     calibration: ReadoutCalibration | None = None) -> Dataset:
    """Synthetic observations for every row of ``descriptor``.

    Switching kinds run the full readout pipeline per shot; for the red-induced
    kinds the green-only and pair experiments each get ``shots`` shots and are
    subtracted.  Fluorescence and depletion are Poisson photon counts over
    ``shots`` repetitions, with the fluorescence scales read as detected
    photons per pulse.  Reported errors are statistical; the readout
    calibration is shared by all rows and its error is not folded in.
    """
    setup = setup or ReadoutSetup()
    kind = descriptor.kind
    template = descriptor.template() if isinstance(descriptor, ExperimentDescriptor) else descriptor
    rng_cal, rng_data = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    cache = PropagatorCache(params)
    values, sigmas = [], []
    if kind in ("fluorescence_vs_green", "depletion_vs_red"):
        for row in template.rows:
            v, s = _photon_observable(kind, row, params, cache, shots, rng_data)
            values.append(v)
            sigmas.append(s)
        return template.with_values(values, sigmas)

    cal = calibration or calibrate_readout(setup, rng_cal)
    for row in template.rows:
        ion_row = Row(row.green_uW, row.red_uW, row.tau_ns, row.spin, 1.0)
        rec_row = Row(row.green_uW, row.red_uW, row.tau_ns, row.spin, 0.0)
        if kind == "switching_vs_green":
            est = measure_switching(green_switching(params, ion_row, cache),
                                    green_switching(params, rec_row, cache), setup, cal, shots, rng_data)
            v, s = (est.P_I, est.P_I_err) if row.channel == "ionization" else (est.P_R, est.P_R_err)
        else:
            pair = measure_switching(pair_switching(params, ion_row, cache, True),
                                     pair_switching(params, rec_row, cache, True), setup, cal, shots, rng_data)
            base = measure_switching(pair_switching(params, ion_row, cache, False),
                                     pair_switching(params, rec_row, cache, False), setup, cal, shots, rng_data)
            if row.channel == "ionization":
                v, s = pair.P_I - base.P_I, math.hypot(pair.P_I_err, base.P_I_err)
            else:
                v, s = pair.P_R - base.P_R, math.hypot(pair.P_R_err, base.P_R_err)
        values.append(v)
        sigmas.append(s)
    out = template.with_values(values, sigmas)
    out.metadata.update(calibration=cal.to_dict())
    return out


def _photon_observable(kind, row, params, cache, shots, rng):
    if kind == "fluorescence_vs_green":
        mean = predict_observable(kind, row, params, cache)
        counts = rng.poisson(mean * shots)
        return counts / shots, math.sqrt(max(counts, 1)) / shots
    # depletion: fluorescence just before (A) and after (B) the red pulse
    pa = pair_state(params, row, cache, with_red=False, pure_charge=False)
    a_mean = model.fluorescence(pa, params) * shots
    b_mean = model.fluorescence(cache.red(row.red_uW) @ pa, params) * shots
    A, B = rng.poisson(a_mean), rng.poisson(b_mean)
    A = max(A, 1)
    ratio = B / A
    sigma = math.sqrt(max(B, 1)) / A * math.sqrt(1.0 + ratio)
    return 1.0 - ratio, sigma


def standard_descriptors(params: RateParameters, with_tau: bool = True) -> list[ExperimentDescriptor]:
    """Measurement layout modeled on the five observation series of the experiment.

    Powers are chosen by pulse area so the layout follows any calibration.
    """
    g = lambda area: params.green_power_for_area(area)
    r = lambda area: params.red_power_for_area(area)
    green_areas = np.array([0.1, 0.25, 0.5, 0.8, 1.2, 1.7, 2.3, 3.0, 3.8, 4.7, 5.7])
    red_areas = np.array([0.05, 0.15, 0.3, 0.5, 0.8, 1.2, 1.8, 2.6, 3.6, 5.0, 7.0])
    g_pair = g(2.1)  # green for the pair experiments (near 95 uW)
    out = [
        ExperimentDescriptor("fluorescence_vs_green", tuple(
            Row(g(x), charge_init=ci) for ci in (0.9125, 0.05, 0.638) for x in green_areas)),
        ExperimentDescriptor("switching_vs_green", tuple(
            Row(g(x), charge_init=ci) for ci in (1.0, 0.0) for x in green_areas)),
        ExperimentDescriptor("depletion_vs_red", tuple(
            Row(g_pair, r(y), DEFAULT_DELAY_NS, 0, 0.7) for y in red_areas)),
        ExperimentDescriptor("red_switching_vs_red", tuple(
            Row(g(xg), r(y), DEFAULT_DELAY_NS, 0, ci)
            for xg in (2.1, 0.8) for ci in (1.0, 0.0) for y in red_areas)),
    ]
    if with_tau:
        taus = (0.592, 12.5, 25.0, 50.0, 75.0, 100.0, 150.0, 200.0, 300.0)
        rows = [Row(g_pair, params.R0 / params.r_cal, t, 0, 0.0) for t in taus]
        rows += [Row(g_pair, params.R0 / params.r_cal, t, s, 1.0) for s in (0, 1) for t in taus]
        out.append(ExperimentDescriptor("switching_vs_tau", tuple(rows)))
    return out
