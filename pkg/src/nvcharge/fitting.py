"""Simultaneous weighted least-squares fit of rate parameters to all datasets.

Relative rates a..f are the fit basis.  ``g_cal`` and ``r_cal`` absorb the
pulse width: only rate x duration enters the populations, so absolute rates
are degenerate with the assumed pulse width and ``pulse_width`` is never
fitted.  Every observation is weighted by its own error; no extra weighting
between observable kinds is applied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .datasets import Dataset, Row
from .observables import PropagatorCache, green_switching, predict_observable
from .params import RateParameters, parameter_names, table1

LOGIT_PARAMS = ("beta0", "beta1", "spin_polarization")
BASE_FREE = ("a", "b", "c", "d", "e", "f", "g_cal", "r_cal", "alpha_minus", "alpha_zero")
TAU_FREE = ("eta_inv", "D_inv", "Is_rate")
SYSTEMATIC_FIXED = ("gamma0_inv", "gamma1_inv", "beta0", "beta1", "spin_polarization")


class FitError(RuntimeError):
    pass


class ConvergenceError(FitError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class SingularJacobianError(FitError):
    def __init__(self, message, null_direction: dict[str, float]):
        super().__init__(f"{message}; null direction {null_direction}")
        self.null_direction = null_direction


# generic damped least squares

@dataclass
class LMResult:
    x: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    history: list[float]
    iterations: int
    converged: bool
    message: str


def numerical_jacobian(fun: Callable, x: np.ndarray, r0: np.ndarray, step: float = 1e-7) -> np.ndarray:
    # absolute steps: the fit coordinates are log/logit transforms, so this is
    # a fixed relative step in the natural parameters and a shift of origin
    # (e.g. a rescaled calibration) leaves the iteration path unchanged
    J = np.empty((len(r0), len(x)))
    for j in range(len(x)):
        h = step
        xp = x.copy()
        xp[j] += h
        J[:, j] = (fun(xp) - r0) / h
    return J


def levenberg_marquardt(fun: Callable[[np.ndarray], np.ndarray], x0, max_iter: int = 500,
                        ftol: float = 1e-10, gtol: float = 1e-8,
                        jac: Callable | None = None) -> LMResult:
    """Minimize ||fun(x)||^2 with Marquardt-scaled damping.

    Only steps that lower the objective are accepted, so ``history`` (the
    objective after every accepted step) is strictly decreasing.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = fun(x)
    sse = float(r @ r)
    history = [sse]
    J = jac(x) if jac else numerical_jacobian(fun, x, r)
    lam = 1e-3
    message = "maximum iterations reached"
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        g = J.T @ r
        if np.max(np.abs(g)) < gtol:
            converged, message = True, "gradient below tolerance"
            break
        A = J.T @ J
        scale = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), 1e-300))
        accepted = False
        for _ in range(60):
            try:
                step = np.linalg.solve(A + lam * np.diag(scale), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = x + step
            r_new = fun(x_new)
            sse_new = float(r_new @ r_new)
            if np.isfinite(sse_new) and sse_new < sse:
                accepted = True
                break
            lam *= 4
        if not accepted:
            converged, message = True, "no further decrease possible"
            break
        rel = (sse - sse_new) / max(sse, 1e-300)
        x, r, sse = x_new, r_new, sse_new
        history.append(sse)
        lam = max(lam / 5, 1e-12)
        J = jac(x) if jac else numerical_jacobian(fun, x, r)
        if rel < ftol:
            converged, message = True, "relative objective change below tolerance"
            break
    return LMResult(x, r, J, history, it, converged, message)


# parameter transforms

def _to_u(name: str, value: float) -> float:
    if name in LOGIT_PARAMS:
        v = min(max(value, 1e-12), 1 - 1e-12)
        return math.log(v / (1 - v))
    return math.log(max(value, 1e-300))


def _from_u(name: str, u: float) -> float:
    if name in LOGIT_PARAMS:
        return 1.0 / (1.0 + math.exp(-u))
    return math.exp(u)


def _dtheta_du(name: str, value: float) -> float:
    return value * (1 - value) if name in LOGIT_PARAMS else value


# global fit

@dataclass(frozen=True)
class FitConfig:
    initial: RateParameters | None = None
    free: tuple[str, ...] | None = None
    fixed: tuple[str, ...] = ()
    variant: str | None = None
    max_iter: int = 500
    ftol: float = 1e-10
    gtol: float = 1e-8
    multistart: int = 0
    seed: int = 0
    propagate_fixed: bool = False


@dataclass
class FitResult:
    params: RateParameters
    names: tuple[str, ...]
    errors: dict[str, float]
    covariance: np.ndarray
    sse: float
    n_data: int
    fixed: tuple[str, ...]
    non_identifiable: tuple[str, ...]
    variant: str
    history: list[float]
    iterations: int
    converged: bool
    residuals: np.ndarray
    systematic: dict[str, float] = field(default_factory=dict)

    @property
    def dof(self) -> int:
        return self.n_data - len(self.names)

    @property
    def reduced_chi2(self) -> float:
        return self.sse / self.dof if self.dof > 0 else math.nan

    def value(self, name: str) -> float:
        return getattr(self.params, name)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "params": self.params.to_dict(with_errors=False),
            "free": list(self.names),
            "errors": self.errors,
            "covariance": self.covariance.tolist(),
            "sse": self.sse,
            "n_data": self.n_data,
            "reduced_chi2": self.reduced_chi2,
            "fixed": list(self.fixed),
            "non_identifiable": list(self.non_identifiable),
            "systematic": self.systematic,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def resolve_free(datasets: Sequence[Dataset], config: FitConfig) -> tuple[str, ...]:
    names = set(parameter_names())
    for n in tuple(config.free or ()) + tuple(config.fixed):
        if n not in names:
            raise ValueError(f"unknown parameter {n!r}")
    if config.free is not None:
        clash = set(config.free) & set(config.fixed)
        if clash:
            raise ValueError(f"parameters declared both fixed and free: {sorted(clash)}")
        free = tuple(config.free)
    else:
        default = BASE_FREE + (TAU_FREE if any(d.kind == "switching_vs_tau" for d in datasets) else ())
        free = tuple(n for n in default if n not in config.fixed)
    if "pulse_width" in free:
        raise ValueError("pulse_width is degenerate with g_cal and r_cal and cannot be fitted")
    if not free:
        raise ValueError("no free parameters")
    return free


def residual_function(datasets: Sequence[Dataset], base: RateParameters, names: Sequence[str]):
    obs = np.concatenate([[r.value for r in d.rows] for d in datasets])
    sig = np.concatenate([[r.sigma for r in d.rows] for d in datasets])

    def params_at(u):
        return base.replace(**{n: _from_u(n, ui) for n, ui in zip(names, u)})

    def fun(u):
        try:
            p = params_at(u)
        except ValueError:
            return np.full(len(obs), np.inf)
        cache = PropagatorCache(p)
        pred = np.concatenate([[predict_observable(d.kind, r, p, cache) for r in d.rows]
                               for d in datasets])
        return (obs - pred) / sig

    return fun, params_at


def _single_fit(datasets, base, names, config) -> tuple[LMResult, Callable]:
    fun, params_at = residual_function(datasets, base, names)
    u0 = np.array([_to_u(n, getattr(base, n)) for n in names])
    res = levenberg_marquardt(fun, u0, config.max_iter, config.ftol, config.gtol)
    return res, params_at


def fit(datasets: Sequence[Dataset], config: FitConfig | None = None) -> FitResult:
    """Fit the free rate parameters to every dataset at once."""
    config = config or FitConfig()
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    for d in datasets:
        if not d.is_observed:
            raise ValueError(f"dataset {d.kind} lacks values or positive errors")
    base = config.initial or table1()
    if config.variant is not None:
        base = base.replace(ionization_target=config.variant)
    names = resolve_free(datasets, config)

    # parameters the data cannot see are held at their initial values
    fun, _ = residual_function(datasets, base, names)
    u0 = np.array([_to_u(n, getattr(base, n)) for n in names])
    r0 = fun(u0)
    if not np.all(np.isfinite(r0)):
        raise ValueError("model undefined at the initial guess")
    norms = np.linalg.norm(numerical_jacobian(fun, u0, r0), axis=0)
    blind = tuple(n for n, c in zip(names, norms) if c <= 1e-8 * max(norms.max(), 1e-300))
    names = tuple(n for n in names if n not in blind)
    if not names:
        raise FitError("no parameter is constrained by the data")

    best, params_at = _single_fit(datasets, base, names, config)
    if config.multistart:
        rng = np.random.default_rng(config.seed)
        u_best = best.x
        for _ in range(config.multistart):
            start = base.replace(**{
                n: (_from_u(n, u_best[i] + rng.uniform(-0.5, 0.5)) if n in LOGIT_PARAMS
                    else getattr(base, n) * math.exp(rng.uniform(-math.log(3), math.log(3))))
                for i, n in enumerate(names)})
            trial, _ = _single_fit(datasets, start, names, config)
            if trial.history[-1] < best.history[-1]:
                best = trial
    if not best.converged:
        raise ConvergenceError(f"fit did not converge in {config.max_iter} iterations")

    params = params_at(best.x)
    cov = _covariance(best.jacobian, names, params)
    errors = {n: float(math.sqrt(max(cov[i, i], 0.0))) for i, n in enumerate(names)}
    fixed = tuple(n for n in parameter_names() if n not in names)
    result = FitResult(params.replace(errors={**dict(base.errors), **errors}), names, errors, cov,
                       best.history[-1], len(best.residuals), fixed, blind,
                       params.ionization_target, best.history, best.iterations, best.converged,
                       best.residuals)
    if config.propagate_fixed:
        _add_systematics(result, datasets, base, config)
    return result


def _covariance(J: np.ndarray, names: Sequence[str], params: RateParameters) -> np.ndarray:
    U, s, Vt = np.linalg.svd(J)
    if len(s) < len(names) or s[-1] <= 1e-10 * s[0]:
        direction = Vt[-1]
        raise SingularJacobianError("Jacobian is singular at the optimum",
                                    {n: float(v) for n, v in zip(names, direction)})
    cov_u = (Vt.T / s ** 2) @ Vt
    D = np.array([_dtheta_du(n, getattr(params, n)) for n in names])
    return cov_u * np.outer(D, D)


def _add_systematics(result: FitResult, datasets, base: RateParameters, config: FitConfig) -> None:
    """Refit with each fixed literature value moved by +-1 sigma; add shifts in quadrature."""
    shifts = {n: 0.0 for n in result.names}
    for name in SYSTEMATIC_FIXED:
        sigma = base.errors.get(name)
        if name in result.names or not sigma:
            continue
        moved = []
        for sign in (1, -1):
            value = getattr(result.params, name) + sign * sigma
            if name in LOGIT_PARAMS:
                value = min(max(value, 0.0), 1.0)
            try:
                start = result.params.replace(**{name: value})
            except ValueError:
                continue
            res, params_at = _single_fit(datasets, start, result.names, config)
            moved.append(params_at(res.x))
        for n in result.names:
            if moved:
                d = np.mean([abs(getattr(p, n) - getattr(result.params, n)) for p in moved])
                shifts[n] += d * d
    result.systematic = {n: math.sqrt(v) for n, v in shifts.items()}
    result.errors = {n: math.hypot(result.errors[n], result.systematic[n]) for n in result.names}
    result.params = result.params.replace(errors={**dict(result.params.errors), **result.errors})


# green power cross-calibration

def cross_calibrate_green(reference: RateParameters | FitResult, probe: Dataset,
                          max_reference_power: float) -> float:
    """Green power whose single-pulse switching best matches ``probe``.

    ``probe`` holds green-only ionization/recombination probabilities measured
    alongside a red experiment; each row's ``green_uW`` is ignored.
    """
    params = reference.params if isinstance(reference, FitResult) else reference
    rows = [r for r in probe.rows if r.red_uW == 0]
    if not rows:
        raise ValueError("probe contains no green-only baseline rows")
    obs = np.array([r.value for r in rows])
    sig = np.array([r.sigma if r.sigma > 0 else 1.0 for r in rows])
    upper = 2.0 * max_reference_power

    def cost(power):
        cache = PropagatorCache(params)
        pred = np.array([green_switching(params, Row(power, charge_init=r.charge_init), cache)
                         for r in rows])
        return float(np.sum(((obs - pred) / sig) ** 2))

    grid = np.linspace(0.0, upper, 401)
    costs = np.array([cost(p) for p in grid])
    k = int(np.argmin(costs))
    if k == len(grid) - 1:
        raise FitError(f"no calibration solution in [0, {upper:g}] uW")
    if k == 0:
        lo, hi = grid[0], grid[1]
    else:
        lo, hi = grid[k - 1], grid[k + 1]
    res = minimize_scalar(cost, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
    best = res.x if res.fun <= costs[k] else grid[k]
    return float(best)
