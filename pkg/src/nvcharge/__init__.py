"""Charge-state dynamics of the NV centre under picosecond green/red pulse pairs."""
from .params import RateParameters, load_params, save_params, table1
from .model import (LEVELS, PulseSequence, Segment, build_rate_matrix, fluorescence,
                    propagate, run_sequence)

__all__ = ["RateParameters", "load_params", "save_params", "table1", "LEVELS",
           "PulseSequence", "Segment", "build_rate_matrix", "fluorescence",
           "propagate", "run_sequence"]
