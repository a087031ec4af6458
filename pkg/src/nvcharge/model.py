"""Linear rate-equation model of NV charge, excitation and spin populations.

Seven kinetic levels are tracked, ordered as in ``LEVELS``.  Generators act
on column vectors of populations, ``dp/dt = L @ p``, so every column of a
generator sums to zero.

Square pulses are assumed.  The true pulse shape does not matter for the
populations after a pulse because every optical rate is linear in the
instantaneous power, so only the pulse area (rate x duration) enters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm

from .params import RateParameters

LEVELS = ("g_minus_0", "g_minus_1", "e_minus_0", "e_minus_1", "singlet", "g_zero", "e_zero")
G0, G1, E0, E1, S, GZ, EZ = range(7)
N_LEVELS = len(LEVELS)

FOUR_LEVELS = ("g_minus", "e_minus", "g_zero", "e_zero")

SEGMENT_KINDS = ("green", "red", "dark", "mw_pi")
OPTICAL_KINDS = ("green", "red", "dark")

STATE_TOL = 1e-10


def _add(L: np.ndarray, src: int, dst: int, rate: float) -> None:
    L[dst, src] += rate
    L[src, src] -= rate


def _check_kind(kind: str, power: float) -> None:
    if kind not in OPTICAL_KINDS:
        raise ValueError(f"unknown segment kind {kind!r}; expected one of {OPTICAL_KINDS}")
    if power < 0:
        raise ValueError(f"power must be non-negative, got {power}")


def build_rate_matrix(params: RateParameters, kind: str, power: float = 0.0,
                      relaxation: bool = True) -> np.ndarray:
    """Generator for one illumination condition.

    ``relaxation=False`` keeps only the optically driven transitions, which is
    the single-pulse model used for the excitation/depletion predictions.
    """
    _check_kind(kind, power)
    L = np.zeros((N_LEVELS, N_LEVELS))
    ion = GZ if params.ionization_target == "ground" else EZ

    if kind == "green" and power > 0:
        G = params.green_rate(power)
        for g, e in ((G0, E0), (G1, E1)):
            _add(L, g, e, G)
            _add(L, e, ion, params.a * G)
        _add(L, GZ, EZ, params.c * G)
        # recombination repopulates both spin projections equally
        _add(L, EZ, G0, 0.5 * params.b * G)
        _add(L, EZ, G1, 0.5 * params.b * G)
    elif kind == "red" and power > 0:
        R = params.red_rate(power)
        for g, e in ((G0, E0), (G1, E1)):
            _add(L, e, g, R)
            _add(L, e, ion, params.d * R)
        _add(L, EZ, G0, 0.5 * params.e * R)
        _add(L, EZ, G1, 0.5 * params.e * R)
        _add(L, EZ, GZ, params.f * R)
        _add(L, S, ion, params.singlet_ionization_rate(power))

    if relaxation:
        _add(L, E0, G0, params.radiative0)
        _add(L, E0, S, params.shelving0)
        _add(L, E1, G1, params.radiative1)
        _add(L, E1, S, params.shelving1)
        _add(L, S, G0, 1.0 / params.D_inv)
        _add(L, EZ, GZ, 1.0 / params.eta_inv)
    return L


def build_four_level_matrix(params: RateParameters, kind: str, power: float = 0.0,
                            relaxation: bool = True) -> np.ndarray:
    """Reduced generator over (g-, e-, g0, e0): no singlet and no spin.

    Relaxation uses the m_s=0 lifetime and ignores shelving, so it coincides
    with the seven-level model only when beta0 = beta1 = 0 and both NV-
    lifetimes are equal.
    """
    _check_kind(kind, power)
    L = np.zeros((4, 4))
    gm, em, gz, ez = range(4)
    ion = gz if params.ionization_target == "ground" else ez
    if kind == "green" and power > 0:
        G = params.green_rate(power)
        _add(L, gm, em, G)
        _add(L, em, ion, params.a * G)
        _add(L, gz, ez, params.c * G)
        _add(L, ez, gm, params.b * G)
    elif kind == "red" and power > 0:
        R = params.red_rate(power)
        _add(L, em, gm, R)
        _add(L, em, ion, params.d * R)
        _add(L, ez, gm, params.e * R)
        _add(L, ez, gz, params.f * R)
    if relaxation:
        _add(L, em, gm, 1.0 / params.gamma0_inv)
        _add(L, ez, gz, 1.0 / params.eta_inv)
    return L


def propagate(state: np.ndarray, L: np.ndarray, t: float) -> np.ndarray:
    """Evolve populations for ``t`` ns under the constant generator ``L``."""
    if t < 0:
        raise ValueError(f"propagation time must be non-negative, got {t}")
    state = np.asarray(state, dtype=float)
    if t == 0:
        return state.copy()
    return expm(L * t) @ state


# states

def validate_state(state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if state.shape != (N_LEVELS,):
        raise ValueError(f"state must have {N_LEVELS} components, got shape {state.shape}")
    if np.any(state < -STATE_TOL) or np.any(state > 1 + STATE_TOL):
        raise ValueError("state components must lie in [0, 1]")
    if abs(state.sum() - 1.0) > STATE_TOL:
        raise ValueError(f"state populations sum to {state.sum()!r}, not 1")
    return state


def pure_state(level: str | int) -> np.ndarray:
    idx = LEVELS.index(level) if isinstance(level, str) else int(level)
    p = np.zeros(N_LEVELS)
    p[idx] = 1.0
    return p


def ground_state(nv_minus: float, spin_polarization: float) -> np.ndarray:
    """Ground-state populations for a given NV- fraction and m_s=0 fraction."""
    p = np.zeros(N_LEVELS)
    p[G0] = nv_minus * spin_polarization
    p[G1] = nv_minus * (1.0 - spin_polarization)
    p[GZ] = 1.0 - nv_minus
    return p


def nv_minus_population(state: np.ndarray) -> float:
    return float(np.sum(state[[G0, G1, E0, E1, S]]))


def nv_zero_population(state: np.ndarray) -> float:
    return float(state[GZ] + state[EZ])


def spin_polarization(state: np.ndarray) -> float:
    """m_s=0 fraction of the spin-resolved NV- populations (singlet excluded)."""
    ms0 = state[G0] + state[E0]
    total = ms0 + state[G1] + state[E1]
    return float(ms0 / total) if total > 0 else float("nan")


def to_four_level(state: np.ndarray) -> np.ndarray:
    """Merge spin projections; singlet population is counted as NV- ground."""
    return np.array([state[G0] + state[G1] + state[S], state[E0] + state[E1],
                     state[GZ], state[EZ]])


def fluorescence(state: np.ndarray, params: RateParameters) -> float:
    state = np.asarray(state)
    if state.shape == (4,):
        return float(params.alpha_minus * state[1] + params.alpha_zero * state[3])
    return float(params.alpha_minus * (state[E0] + state[E1]) + params.alpha_zero * state[EZ])


# pulse sequences

@dataclass(frozen=True)
class Segment:
    kind: str
    duration: float = 0.0  # ps, ignored for mw_pi
    power: float = 0.0  # uW

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.duration < 0:
            raise ValueError("segment duration must be non-negative")
        if self.power < 0:
            raise ValueError("segment power must be non-negative")


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)

    def __add__(self, other: "PulseSequence") -> "PulseSequence":
        return PulseSequence(self.segments + tuple(other.segments))

    @property
    def duration(self) -> float:
        """Total duration in ps."""
        return sum(s.duration for s in self.segments if s.kind != "mw_pi")

    def to_dict(self) -> dict:
        return {"segments": [{"kind": s.kind, "duration": s.duration, "power": s.power}
                             for s in self.segments]}

    @classmethod
    def from_dict(cls, data: dict) -> "PulseSequence":
        segs = data["segments"] if isinstance(data, dict) else data
        return cls(tuple(Segment(s["kind"], float(s.get("duration", 0.0)),
                                 float(s.get("power", 0.0))) for s in segs))

    @classmethod
    def load(cls, path: str | Path) -> "PulseSequence":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def pulse_pair(green_power: float, red_power: float, delay: float = 592.0,
               width: float = 100.0) -> PulseSequence:
    """Green pulse, dark gap of ``delay`` ps, red pulse."""
    return PulseSequence((Segment("green", width, green_power), Segment("dark", delay),
                          Segment("red", width, red_power)))


def apply_pi_pulse(state: np.ndarray) -> np.ndarray:
    out = np.array(state, dtype=float)
    out[[G0, G1]] = out[[G1, G0]]
    out[[E0, E1]] = out[[E1, E0]]
    return out


def segment_propagator(params: RateParameters, segment: Segment,
                       relaxation: bool = True) -> np.ndarray:
    if segment.kind == "mw_pi":
        P = np.eye(N_LEVELS)
        return apply_pi_pulse(P)
    L = build_rate_matrix(params, segment.kind, segment.power, relaxation)
    return expm(L * segment.duration * 1e-3)


def sequence_propagator(params: RateParameters, seq: Iterable[Segment],
                        relaxation: bool = True) -> np.ndarray:
    """Product of segment propagators, first segment applied first."""
    M = np.eye(N_LEVELS)
    for seg in seq:
        M = segment_propagator(params, seg, relaxation) @ M
    return M


def run_sequence(state: np.ndarray, seq: PulseSequence | Sequence[Segment],
                 params: RateParameters, relaxation: bool = True) -> list[tuple[float, np.ndarray]]:
    """Apply each segment in order; returns (time in ns, state) at every boundary.

    The first entry is the input state at t=0.
    """
    state = validate_state(state).copy()
    t = 0.0
    out = [(t, state)]
    for seg in seq:
        if seg.kind == "mw_pi":
            state = apply_pi_pulse(state)
        else:
            dt = seg.duration * 1e-3
            L = build_rate_matrix(params, seg.kind, seg.power, relaxation)
            state = propagate(state, L, dt)
            t += dt
        out.append((t, state))
    return out


def final_state(state: np.ndarray, seq: PulseSequence | Sequence[Segment],
                params: RateParameters, relaxation: bool = True) -> np.ndarray:
    return run_sequence(state, seq, params, relaxation)[-1][1]
