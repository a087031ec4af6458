"""Print the headline model predictions at the reference rates.

Single-pulse excitation and red branching, the cycling optimum, the
polarization pipeline and the green-only pulse-train fixed points.
"""
import argparse

import numpy as np

from nvcharge import prediction as pr
from nvcharge.params import load_params, table1


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--params", help="rate parameter JSON (default: shipped reference set)")
    ap.add_argument("--relaxation", action="store_true", help="keep dark relaxation during pulses")
    args = ap.parse_args()
    params = load_params(args.params) if args.params else table1()
    cov = pr.parameter_covariance(params)

    exc = pr.green_excitation_sweep(params, np.linspace(0.05, 12.0, 240), args.relaxation, covariance=cov)
    o = exc.optimum
    print(f"max excitation     {o['excited']:.4f} at green area {o['green_area']:.4f} ({o['green_uW']:.1f} uW)")

    br = pr.red_branching_sweep(params, [pr.SATURATING_AREA], args.relaxation)
    print(f"red branching      stimulated {br.channels['stimulated'][0]:.4f}  ionized {br.channels['ionized'][0]:.4f}")

    cyc = pr.cycling_probability(params, np.linspace(0.5, 8.0, 31), [pr.SATURATING_AREA], relaxation=args.relaxation)
    print(f"cycling optimum    {cyc.optimum['cycling']:.4f} at green area {cyc.optimum['green_area']:.4f}")

    nv, pol = pr.polarization_pipeline(params, 0.80, 0.90)
    print(f"polarization       (0.80, 0.90) -> ({nv:.4f}, {pol:.4f})")

    for power in (10, 50, 100, 200, 400):
        tr = pr.steady_state_train(params, float(power), duration_us=1)
        print(f"green train {power:>4} uW  fixed-point N- {tr.fixed_point_nv_minus:.4f}")


if __name__ == "__main__":
    main()
