"""Model predictions for each measured observable kind."""
from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from . import model
from .datasets import KINDS, Row
from .params import RateParameters


class PropagatorCache:
    """Memoized segment propagators for one parameter set.

    Rows in a dataset share powers and gaps, so caching keeps the cost of a
    full objective evaluation to a handful of matrix exponentials.
    """

    def __init__(self, params: RateParameters, relaxation: bool = True):
        self.params = params
        self.relaxation = relaxation
        self._store: dict[tuple, np.ndarray] = {}

    def get(self, kind: str, power: float, duration_ns: float) -> np.ndarray:
        key = (kind, power, duration_ns)
        M = self._store.get(key)
        if M is None:
            L = model.build_rate_matrix(self.params, kind, power, self.relaxation)
            M = expm(L * duration_ns) if duration_ns > 0 else np.eye(model.N_LEVELS)
            self._store[key] = M
        return M

    def green(self, power: float) -> np.ndarray:
        return self.get("green", power, self.params.pulse_ns)

    def red(self, power: float) -> np.ndarray:
        return self.get("red", power, self.params.pulse_ns)

    def dark(self, duration_ns: float) -> np.ndarray:
        return self.get("dark", 0.0, duration_ns)


def initial_state(params: RateParameters, row: Row, pure_charge: bool) -> np.ndarray:
    if pure_charge:
        nv_minus = 1.0 if row.charge_init >= 0.5 else 0.0
    else:
        nv_minus = row.charge_init
    p = model.ground_state(nv_minus, params.spin_polarization)
    return model.apply_pi_pulse(p) if row.spin else p


def pair_state(params: RateParameters, row: Row, cache: PropagatorCache,
               with_red: bool, pure_charge: bool = True) -> np.ndarray:
    """State after green pulse, dark gap and (optionally) the red pulse."""
    p = initial_state(params, row, pure_charge)
    p = cache.green(row.green_uW) @ p
    p = cache.dark(row.tau_ns) @ p
    if with_red:
        p = cache.red(row.red_uW) @ p
    return p


def switched_population(p: np.ndarray, row: Row) -> float:
    """Population that ended in the charge state opposite to the start."""
    if row.channel == "ionization":
        return model.nv_zero_population(p)
    return model.nv_minus_population(p)


def green_switching(params: RateParameters, row: Row, cache: PropagatorCache | None = None) -> float:
    cache = cache or PropagatorCache(params)
    p = cache.green(row.green_uW) @ initial_state(params, row, True)
    return switched_population(p, row)


def pair_switching(params: RateParameters, row: Row, cache: PropagatorCache | None = None,
                   with_red: bool = True) -> float:
    cache = cache or PropagatorCache(params)
    return switched_population(pair_state(params, row, cache, with_red), row)


def predict_observable(kind: str, row: Row, params: RateParameters,
                       cache: PropagatorCache | None = None) -> float:
    """Model value of one observation.

    fluorescence_vs_green: alpha-weighted excited populations right after the
      green pulse, starting from the charge mixture ``charge_init``.
    switching_vs_green: opposite-charge population after one green pulse from
      a pure ground state.
    depletion_vs_red: 1 - B/A with A the fluorescence after the dark gap and
      B right after the red pulse.
    red_switching_vs_red / switching_vs_tau: switching probability of the
      green-gap-red sequence minus that of the same sequence without red.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown observable kind {kind!r}")
    cache = cache or PropagatorCache(params)
    if kind == "fluorescence_vs_green":
        p = cache.green(row.green_uW) @ initial_state(params, row, False)
        return model.fluorescence(p, params)
    if kind == "switching_vs_green":
        return green_switching(params, row, cache)
    if kind == "depletion_vs_red":
        pa = pair_state(params, row, cache, with_red=False, pure_charge=False)
        A = model.fluorescence(pa, params)
        B = model.fluorescence(cache.red(row.red_uW) @ pa, params)
        return 1.0 - B / A
    with_red = pair_switching(params, row, cache, True)
    without = pair_switching(params, row, cache, False)
    return with_red - without


def predict_dataset(dataset, params: RateParameters, cache: PropagatorCache | None = None) -> np.ndarray:
    cache = cache or PropagatorCache(params)
    return np.array([predict_observable(dataset.kind, r, params, cache) for r in dataset.rows])
