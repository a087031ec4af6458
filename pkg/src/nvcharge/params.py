"""Rate parameter container and its JSON representation.

Units used throughout the package: time in ns, rates in GHz, average
optical powers in uW at a 1 MHz repetition rate.  The only exception is
``pulse_width``, which is stored in ps to match how pulse sequences are
written.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

IONIZATION_TARGETS = ("ground", "excited")
IS_SCALINGS = ("linear", "quadratic")

_RATE_FIELDS = ("g_cal", "r_cal", "gamma0_inv", "gamma1_inv", "eta_inv", "D_inv",
                "R0", "alpha_minus", "alpha_zero", "pulse_width")
_RELATIVE_FIELDS = ("a", "b", "c", "d", "e", "f", "Is_rate")
_UNIT_FIELDS = ("beta0", "beta1", "spin_polarization")


@dataclass(frozen=True)
class RateParameters:
    g_cal: float  # GHz per uW of green
    a: float
    b: float
    c: float
    r_cal: float  # GHz per uW of red
    d: float
    e: float
    f: float
    gamma0_inv: float  # ns
    gamma1_inv: float  # ns
    eta_inv: float  # ns
    D_inv: float  # ns
    beta0: float
    beta1: float
    Is_rate: float  # GHz, at red rate R0
    R0: float  # GHz
    alpha_minus: float
    alpha_zero: float
    spin_polarization: float
    pulse_width: float = 100.0  # ps
    ionization_target: str = "ground"
    is_scaling: str = "linear"
    errors: Mapping[str, float] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for name in _RATE_FIELDS:
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be strictly positive, got {value!r}")
        for name in _RELATIVE_FIELDS:
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be non-negative, got {value!r}")
        for name in _UNIT_FIELDS:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
        if self.ionization_target not in IONIZATION_TARGETS:
            raise ValueError(f"ionization_target must be one of {IONIZATION_TARGETS}")
        if self.is_scaling not in IS_SCALINGS:
            raise ValueError(f"is_scaling must be one of {IS_SCALINGS}")
        unknown = set(self.errors) - set(parameter_names())
        if unknown:
            raise ValueError(f"errors given for unknown parameters: {sorted(unknown)}")

    # derived quantities

    @property
    def pulse_ns(self) -> float:
        return self.pulse_width * 1e-3

    @property
    def radiative0(self) -> float:
        return (1.0 - self.beta0) / self.gamma0_inv

    @property
    def radiative1(self) -> float:
        return (1.0 - self.beta1) / self.gamma1_inv

    @property
    def shelving0(self) -> float:
        return self.beta0 / self.gamma0_inv

    @property
    def shelving1(self) -> float:
        return self.beta1 / self.gamma1_inv

    def green_rate(self, power: float) -> float:
        return self.g_cal * power

    def red_rate(self, power: float) -> float:
        return self.r_cal * power

    def singlet_ionization_rate(self, red_power: float) -> float:
        """Red-induced singlet ionization rate at ``red_power`` (GHz)."""
        ratio = self.red_rate(red_power) / self.R0
        if self.is_scaling == "quadratic":
            ratio = ratio * ratio
        return self.Is_rate * ratio

    def green_power_for_area(self, area: float) -> float:
        return area / (self.g_cal * self.pulse_ns)

    def red_power_for_area(self, area: float) -> float:
        return area / (self.r_cal * self.pulse_ns)

    def replace(self, **changes) -> "RateParameters":
        return dataclasses.replace(self, **changes)

    def to_dict(self, with_errors: bool = True) -> dict[str, Any]:
        out = {name: getattr(self, name) for name in parameter_names()}
        out["ionization_target"] = self.ionization_target
        out["is_scaling"] = self.is_scaling
        if with_errors and self.errors:
            out["errors"] = dict(self.errors)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RateParameters":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown parameter fields: {sorted(unknown)}")
        kwargs = dict(data)
        kwargs["errors"] = {k: float(v) for k, v in dict(data.get("errors", {})).items()}
        for name in parameter_names():
            if name in kwargs:
                kwargs[name] = float(kwargs[name])
        return cls(**kwargs)


def parameter_names() -> tuple[str, ...]:
    """Names of the numeric fields, in declaration order."""
    return tuple(f.name for f in dataclasses.fields(RateParameters)
                 if f.name not in ("ionization_target", "is_scaling", "errors"))


def load_params(path: str | Path) -> RateParameters:
    with open(path) as fh:
        return RateParameters.from_dict(json.load(fh))


def save_params(params: RateParameters, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=2)
        fh.write("\n")


def table1_path() -> Path:
    return Path(str(resources.files("nvcharge") / "data" / "table1.json"))


def table1() -> RateParameters:
    """Reference parameter set: fitted relative rates and lifetimes with 1-sigma errors.

    ``g_cal``, ``r_cal`` and the fluorescence scales are setup specific; the
    shipped values place the single-pulse green optimum near 158 uW and make
    350 uW of red saturating.
    """
    return load_params(table1_path())
