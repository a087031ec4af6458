"""Command-line entry point: ``nvcharge {simulate,fit,predict,generate,extract}``.

Settings are layered: command-line flags override values from ``--config``
(a JSON object keyed by flag name), which override the built-in defaults.
The effective settings are written to ``config.json`` in the output
directory.  All inputs are validated before the output directory is touched.
Failures print ``{"error": {"kind": ..., "message": ...}}`` to stderr and
exit with status 2 (bad configuration or unreadable input) or 1 (failure
while running).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import model, oracle, prediction
from .datasets import read_datasets, write_datasets
from .fitting import FitConfig, FitError, fit, resolve_free
from .observables import predict_dataset
from .params import load_params, table1, table1_path
from .photon_stats import ReadoutCalibration, SingularSystemError, extract_switching

DEFAULT_SEED = 20180701  # used by every stochastic subcommand unless --seed is given


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# deterministic output

def _fmt(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps(obj, indent: int = 0) -> str:
    """JSON with every float written to 17 significant digits."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(dumps(v) for v in seq) + "]"
        return "[\n" + ",\n".join(inner + dumps(v, indent + 1) for v in seq) + f"\n{pad}]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt(float(obj))
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def _write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(float(v)) if not isinstance(v, (str, int, np.integer)) else v for v in row])


# input helpers

def _load_params(path):
    try:
        return load_params(path) if path else table1()
    except FileNotFoundError:
        raise CLIError("config", f"parameter file not found: {path}") from None
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CLIError("parse", f"{path}: {exc}") from None


def _require_file(path, what: str) -> Path:
    if not path:
        raise CLIError("config", f"missing required {what} (--{what})")
    p = Path(path)
    if not p.is_file():
        raise CLIError("config", f"{what} file not found: {path}")
    return p


def _grid(spec: str, name: str) -> np.ndarray:
    """``start:stop:num`` (inclusive linear grid) or a comma-separated list."""
    try:
        if ":" in spec:
            start, stop, num = spec.split(":")
            values = np.linspace(float(start), float(stop), int(num))
        else:
            values = np.array([float(v) for v in spec.split(",") if v.strip()])
    except ValueError:
        raise CLIError("config", f"--{name}: cannot parse grid {spec!r}") from None
    if values.size == 0 or np.any(values < 0) or not np.all(np.isfinite(values)):
        raise CLIError("config", f"--{name}: grid must be non-empty, finite and non-negative")
    return values


def _names(spec) -> tuple[str, ...]:
    if not spec:
        return ()
    if isinstance(spec, (list, tuple)):
        return tuple(spec)
    return tuple(s.strip() for s in spec.split(",") if s.strip())


def _prepare_out(args) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise CLIError("config", f"output path exists and is not a directory: {out}")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {k: v for k, v in sorted(vars(args).items())
                                      if k not in ("func", "config")})
    return out


# subcommands

def cmd_simulate(args) -> None:
    params = _load_params(args.params)
    seq_path = _require_file(args.seq, "seq")
    try:
        seq = model.PulseSequence.load(seq_path)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CLIError("parse", f"{seq_path}: {exc}") from None
    if args.initial in model.LEVELS:
        state = model.pure_state(args.initial)
    elif args.initial == "mixture":
        if not (0 <= args.nv_minus <= 1 and 0 <= args.polarization <= 1):
            raise CLIError("config", "--nv-minus and --polarization must lie in [0, 1]")
        state = model.ground_state(args.nv_minus, args.polarization)
    else:
        raise CLIError("config", f"--initial must be 'mixture' or one of {model.LEVELS}")
    if args.trajectories < 0:
        raise CLIError("config", "--trajectories must be non-negative")

    out = _prepare_out(args)
    records = model.run_sequence(state, seq, params, relaxation=not args.no_relaxation)
    _write_csv(out / "trajectory.csv", ("t_ns",) + model.LEVELS,
               ([t, *p] for t, p in records))
    final = records[-1][1]
    summary = {"final_state": dict(zip(model.LEVELS, final)),
               "nv_minus": model.nv_minus_population(final),
               "spin_polarization": model.spin_polarization(final),
               "fluorescence": model.fluorescence(final, params)}
    if args.trajectories:
        levels = oracle.sample_final_levels(seq, params, state, args.trajectories, args.seed,
                                            relaxation=not args.no_relaxation, threads=args.threads)
        freq = np.bincount(levels, minlength=model.N_LEVELS) / args.trajectories
        summary["sampled_final_state"] = dict(zip(model.LEVELS, freq))
        summary["trajectories"] = args.trajectories
    _write_json(out / "summary.json", summary)


def cmd_fit(args) -> None:
    params = _load_params(args.params)
    paths = [_require_file(p, "data") for p in (args.data or [None])]
    datasets = []
    for p in paths:
        try:
            datasets.extend(read_datasets(p))
        except ValueError as exc:
            raise CLIError("parse", str(exc)) from None
    free, fixed = _names(args.free) or None, _names(args.fixed)
    try:
        config = FitConfig(initial=params, free=free, fixed=fixed, variant=args.variant,
                           max_iter=args.max_iter, multistart=args.multistart, seed=args.seed,
                           propagate_fixed=args.systematics)
        resolve_free(datasets, config)
    except ValueError as exc:
        raise CLIError("config", str(exc)) from None
    for d in datasets:
        if not d.is_observed:
            raise CLIError("parse", f"dataset {d.kind} lacks values or positive errors")

    out = _prepare_out(args)
    result = fit(datasets, config)
    _write_json(out / "fit.json", result.to_dict())
    rows = []
    for d in datasets:
        pred = predict_dataset(d, result.params)
        for r, m in zip(d.rows, pred):
            rows.append([d.kind, r.green_uW, r.red_uW, r.tau_ns, r.spin, r.charge_init, r.value, r.sigma,
                         m, (r.value - m) / r.sigma])
    _write_csv(out / "residuals.csv", ("kind", "green_uW", "red_uW", "tau_ns", "spin", "charge_init",
                                       "value", "sigma", "model", "residual"), rows)


def cmd_predict(args) -> None:
    params = _load_params(args.params)
    relax = args.relaxation
    cov = prediction.parameter_covariance(params) if args.bands else None
    what = args.what
    # everything is computed before the output directory is created
    try:
        if what == "excitation":
            res = prediction.green_excitation_sweep(params, _grid(args.green, "green"), relax, cov)
        elif what == "branching":
            res = prediction.red_branching_sweep(params, _grid(args.red, "red"), relax, cov)
        elif what == "cycling":
            res = prediction.cycling_probability(params, _grid(args.green, "green"), _grid(args.red, "red"),
                                                 args.delay_ns, relax, cov)
            nv, pol = prediction.polarization_pipeline(params, args.nv_minus, args.polarization,
                                                       res.optimum["green_area"], delay_ns=args.delay_ns)
            res.optimum["pipeline"] = {"initial_nv_minus": args.nv_minus,
                                       "initial_polarization": args.polarization,
                                       "final_nv_minus": nv, "final_polarization": pol}
        elif what == "grid":
            res = prediction.red_induced_switching_grid(params, _grid(args.green_uw, "green-uw"),
                                                        _grid(args.red_uw, "red-uw"), args.delay_ns)
        else:
            if args.green_power < 0 or args.red_power < 0 or args.duration_us <= 0:
                raise CLIError("config", "train powers must be non-negative and the duration positive")
            tr = prediction.steady_state_train(params, args.green_power, args.red_power, args.duration_us,
                                               args.period_ns, args.delay_ns)
    except ValueError as exc:
        raise CLIError("config", str(exc)) from None

    out = _prepare_out(args)
    if what == "steady":
        _write_csv(out / "train.csv", ("time_us", "nv_minus"), zip(tr.times_us, tr.nv_minus))
        _write_json(out / "optimum.json", {
            "fixed_point_nv_minus": tr.fixed_point_nv_minus,
            "fixed_point": dict(zip(model.LEVELS, tr.fixed_point)),
            "final_nv_minus": float(tr.nv_minus[-1])})
        return
    res.to_csv(out / "sweep.csv")
    _write_json(out / "optimum.json", res.optimum)


def cmd_generate(args) -> None:
    params = _load_params(args.params)
    if args.shots < 1:
        raise CLIError("config", "--shots must be positive")
    setup = oracle.ReadoutSetup(prepared_nv_minus=args.prepared_nv_minus,
                                calibration_shots=args.calibration_shots)
    if args.mode == "dataset":
        kinds = _names(args.kinds)
        descriptors = oracle.standard_descriptors(params, with_tau=True)
        known = {d.kind for d in descriptors}
        bad = [k for k in kinds if k not in known]
        if bad:
            raise CLIError("config", f"unknown observable kind(s): {bad}")
        out = _prepare_out(args)
        rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(1)[0])
        cal = oracle.calibrate_readout(setup, rng)
        data = [oracle.generate_dataset(d, params, args.shots, args.seed + 1 + i, setup, cal)
                for i, d in enumerate(descriptors) if not kinds or d.kind in kinds]
        write_datasets(data, out / "data.csv")
        _write_json(out / "calibration.json", cal.to_dict())
        return

    if args.green_uw < 0 or args.red_uw < 0:
        raise CLIError("config", "powers must be non-negative")
    out = _prepare_out(args)
    cal_rng, shot_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(args.seed).spawn(2))
    cal = oracle.calibrate_readout(setup, cal_rng)
    seq = (model.pulse_pair(args.green_uw, args.red_uw, args.delay_ns * 1e3, params.pulse_width)
           if args.red_uw > 0 else
           model.PulseSequence([model.Segment("green", params.pulse_width, args.green_uw)]))
    p_i = model.nv_zero_population(model.final_state(model.pure_state("g_minus_0"), seq, params))
    p_r = model.nv_minus_population(model.final_state(model.pure_state("g_zero"), seq, params))
    n1, n2 = oracle.simulate_readout_pairs(p_i, p_r, setup, args.shots, shot_rng)
    _write_csv(out / "readouts.csv", ("first", "second"), zip(n1.tolist(), n2.tolist()))
    _write_json(out / "calibration.json", cal.to_dict())
    _write_json(out / "truth.json", {"P_I": p_i, "P_R": p_r})


def _read_readouts(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CLIError("parse", f"{path}: empty file") from None
        for i, (got, want) in enumerate(zip(header + [""] * 2, ("first", "second"))):
            if got != want:
                raise CLIError("parse", f"{path}: unexpected column {got!r} at position {i}; "
                                        "expected header first,second")
        if len(header) != 2:
            raise CLIError("parse", f"{path}: unexpected column {header[2]!r} at position 2")
        try:
            rows = [(int(a), int(b)) for a, b in reader]
        except ValueError as exc:
            raise CLIError("parse", f"{path}: {exc}") from None
    if not rows:
        raise CLIError("parse", f"{path}: no readout rows")
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1]


def cmd_extract(args) -> None:
    cal_path = _require_file(args.calibration, "calibration")
    try:
        cal = ReadoutCalibration.load(cal_path)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CLIError("parse", f"{cal_path}: {exc}") from None
    n1, n2 = _read_readouts(_require_file(args.data[0] if args.data else None, "data"))
    counts = oracle.repeat_counts(n1, n2, cal.threshold)
    if counts[0] == 0 or counts[2] == 0:
        raise CLIError("parse", "both readout outcomes must occur in the first readout")
    q0, qm, s0, sm = oracle.q_statistics(counts)
    try:
        est = extract_switching(q0, qm, cal, s0, sm)
    except SingularSystemError as exc:
        raise CLIError("config", str(exc)) from None
    out = _prepare_out(args)
    _write_json(out / "switching.json", {"P_I": est.P_I, "P_R": est.P_R, "P_I_err": est.P_I_err,
                                         "P_R_err": est.P_R_err, "Q0": q0, "Qm": qm,
                                         "Q0_err": s0, "Qm_err": sm, "shots": int(len(n1))})


# argument parsing

def _common(p: argparse.ArgumentParser, seed=True) -> None:
    p.add_argument("--config", help="JSON file of flag defaults")
    p.add_argument("--params", help=f"rate parameter JSON (default: shipped {table1_path().name})")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    if seed:
        p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"master seed (default {DEFAULT_SEED})")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="nvcharge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("simulate", help="propagate populations through a pulse sequence")
    _common(p)
    p.add_argument("--seq", help="pulse sequence JSON")
    p.add_argument("--initial", default="mixture", help="level name or 'mixture'")
    p.add_argument("--nv-minus", type=float, default=1.0)
    p.add_argument("--polarization", type=float, default=0.9)
    p.add_argument("--trajectories", type=int, default=0, help="also sample this many jump trajectories")
    p.add_argument("--no-relaxation", action="store_true", help="optical rates only")
    p.set_defaults(func=cmd_simulate)
    subs["simulate"] = p

    p = sub.add_parser("fit", help="global fit of the rate parameters")
    _common(p)
    p.add_argument("--data", nargs="+", help="dataset CSV file(s)")
    p.add_argument("--variant", choices=("ground", "excited"), default=None)
    p.add_argument("--free", help="comma-separated free parameters (default: all identifiable)")
    p.add_argument("--fixed", help="comma-separated parameters held fixed")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--multistart", type=int, default=0)
    p.add_argument("--systematics", action="store_true",
                   help="add shifts from +-1 sigma of the fixed literature values")
    p.set_defaults(func=cmd_fit)
    subs["fit"] = p

    p = sub.add_parser("predict", help="model predictions")
    _common(p)
    p.add_argument("what", choices=("excitation", "branching", "cycling", "grid", "steady"))
    p.add_argument("--green", default="0:10:101", help="green pulse areas, start:stop:num or list")
    p.add_argument("--red", default="0:20:81", help="red pulse areas, start:stop:num or list")
    p.add_argument("--green-uw", default="10,25,50,75,95", help="green powers (uW) for 'grid'")
    p.add_argument("--red-uw", default="0:600:25", help="red powers (uW) for 'grid'")
    p.add_argument("--delay-ns", type=float, default=oracle.DEFAULT_DELAY_NS)
    p.add_argument("--relaxation", action="store_true",
                   help="include spontaneous decay during single-pulse predictions")
    p.add_argument("--bands", action="store_true", help="propagate parameter errors into bands")
    p.add_argument("--nv-minus", type=float, default=0.8, help="pipeline input NV- fraction (cycling)")
    p.add_argument("--polarization", type=float, default=0.9, help="pipeline input polarization (cycling)")
    p.add_argument("--green-power", type=float, default=100.0, help="train green power (uW)")
    p.add_argument("--red-power", type=float, default=0.0, help="train red power (uW)")
    p.add_argument("--duration-us", type=float, default=150.0)
    p.add_argument("--period-ns", type=float, default=1000.0)
    p.set_defaults(func=cmd_predict)
    subs["predict"] = p

    p = sub.add_parser("generate", help="synthetic data from the stochastic oracle")
    _common(p)
    p.add_argument("--mode", choices=("dataset", "readouts"), default="dataset")
    p.add_argument("--kinds", help="comma-separated observable kinds (dataset mode; default all)")
    p.add_argument("--shots", type=int, default=100_000)
    p.add_argument("--green-uw", type=float, default=95.0, help="green power (readouts mode)")
    p.add_argument("--red-uw", type=float, default=0.0, help="red power (readouts mode)")
    p.add_argument("--delay-ns", type=float, default=oracle.DEFAULT_DELAY_NS)
    p.add_argument("--prepared-nv-minus", type=float, default=0.7)
    p.add_argument("--calibration-shots", type=int, default=1_000_000)
    p.set_defaults(func=cmd_generate)
    subs["generate"] = p

    p = sub.add_parser("extract", help="switching probabilities from paired readouts")
    _common(p, seed=False)
    p.add_argument("--data", nargs=1, help="readout CSV with header first,second")
    p.add_argument("--calibration", help="readout calibration JSON")
    p.set_defaults(func=cmd_extract)
    subs["extract"] = p
    return parser, subs


def _apply_config(argv, parser, subs):
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        path = _require_file(args.config, "config")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CLIError("parse", f"{path}: {exc}") from None
        if not isinstance(values, dict):
            raise CLIError("parse", f"{path}: expected a JSON object")
        sp = subs[args.command]
        known = {a.dest for a in sp._actions}
        unknown = [k for k in values if k.replace("-", "_") not in known]
        if unknown:
            raise CLIError("config", f"{path}: unknown setting(s) {unknown}")
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser, subs = build_parser()
    try:
        args = _apply_config(argv, parser, subs)
        if args.threads < 1:
            raise CLIError("config", "--threads must be at least 1")
        args.func(args)
    except CLIError as exc:
        _report(exc.kind, str(exc))
        return 2
    except (FitError, ValueError, np.linalg.LinAlgError) as exc:
        _report("runtime", str(exc))
        return 1
    return 0


def _report(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": {"kind": kind, "message": message}}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
