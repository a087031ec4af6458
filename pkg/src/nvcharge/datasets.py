"""Tagged observation series and their CSV representation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

KINDS = ("fluorescence_vs_green", "switching_vs_green", "depletion_vs_red",
         "red_switching_vs_red", "switching_vs_tau")
COLUMNS = ("kind", "green_uW", "red_uW", "tau_ns", "spin", "charge_init", "value", "sigma")

DEFAULT_DELAY_NS = 0.592


@dataclass(frozen=True)
class Row:
    """One observation.

    ``charge_init`` is the NV- probability of the initial ground state.  For the
    switching kinds it selects the channel: 1 gives ionization (start in NV-),
    0 gives recombination (start in NV0).  ``spin=1`` means a pi pulse was
    applied before the green pulse.  ``tau_ns`` is the dark gap between the
    end of the green pulse and the start of the red pulse.
    """
    green_uW: float
    red_uW: float = 0.0
    tau_ns: float = DEFAULT_DELAY_NS
    spin: int = 0
    charge_init: float = 1.0
    value: float = math.nan
    sigma: float = math.nan

    def __post_init__(self):
        for name in ("green_uW", "red_uW", "tau_ns", "charge_init", "value", "sigma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "spin", int(self.spin))

    @property
    def channel(self) -> str:
        return "ionization" if self.charge_init >= 0.5 else "recombination"


@dataclass(frozen=True)
class Dataset:
    kind: str
    rows: tuple[Row, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown observable kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "rows", tuple(self.rows))
        for r in self.rows:
            if r.tau_ns < 0:
                raise ValueError("tau_ns must be non-negative")
            if r.green_uW < 0 or r.red_uW < 0:
                raise ValueError("powers must be non-negative")
            if r.spin not in (0, 1):
                raise ValueError("spin flag must be 0 or 1")
            if not 0.0 <= r.charge_init <= 1.0:
                raise ValueError("charge_init must lie in [0, 1]")
            if not math.isnan(r.sigma) and not r.sigma > 0:
                raise ValueError("observation errors must be positive")

    def __len__(self):
        return len(self.rows)

    @property
    def is_observed(self) -> bool:
        return all(not math.isnan(r.value) and r.sigma > 0 for r in self.rows)

    def with_values(self, values, sigmas) -> "Dataset":
        rows = tuple(replace(r, value=float(v), sigma=float(s))
                     for r, v, s in zip(self.rows, values, sigmas))
        return Dataset(self.kind, rows, dict(self.metadata))


def write_datasets(datasets: Iterable[Dataset], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for ds in datasets:
            for r in ds.rows:
                w.writerow([ds.kind, *(_num(getattr(r, c)) for c in COLUMNS[1:])])


def _num(x) -> str:
    return str(x) if isinstance(x, int) else format(x, ".17g")


def read_datasets(path: str | Path) -> list[Dataset]:
    """Read a CSV holding one or more datasets; rows are grouped by kind in file order."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty dataset file") from None
        for i, name in enumerate(header):
            if i >= len(COLUMNS) or name != COLUMNS[i]:
                raise ValueError(f"{path}: unexpected column {name!r} at position {i}; "
                                 f"expected header {','.join(COLUMNS)}")
        if len(header) != len(COLUMNS):
            missing = COLUMNS[len(header):]
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        grouped: dict[str, list[Row]] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(rec)}")
            kind = rec[0].strip()
            try:
                row = Row(float(rec[1]), float(rec[2]), float(rec[3]), int(rec[4]),
                          float(rec[5]), float(rec[6]), float(rec[7]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            grouped.setdefault(kind, []).append(row)
    return [Dataset(kind, tuple(rows)) for kind, rows in grouped.items()]


def synthetic_path() -> Path:
    """Bundled synthetic dataset generated at the reference rates (100k shots per point)."""
    return Path(__file__).parent / "data" / "synthetic_table1.csv"
