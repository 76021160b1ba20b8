"""Least-squares point estimation of model parameters by direct simulation.

The objective is the sum of squared residuals between the integrated
trajectory and the observed series over every observed state.  The
search is a bounded derivative-free simplex refined from several
deterministic starts (bound-box midpoint plus a low-discrepancy spread),
so no adjoint or sensitivity machinery is needed.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import DomainError, IntegrationError, OptimizationError, StructuralError
from .models import DEFAULT_STEP, PopulationConfig, TimeSeriesData, simulate


@dataclass(frozen=True)
class NllsFit:
    """Best point found, its residual, and the per-start residuals."""

    param_names: tuple[str, ...]
    theta: np.ndarray
    residual: float
    start_residuals: tuple[float, ...]
    seed: int

    def theta_map(self) -> dict:
        return {n: float(v) for n, v in zip(self.param_names, self.theta)}

    def to_dict(self) -> dict:
        return {
            "param_names": list(self.param_names),
            "theta": [float(v) for v in self.theta],
            "residual": float(self.residual),
            "start_residuals": [float(v) for v in self.start_residuals],
            "seed": int(self.seed),
        }


def _start_points(bounds: np.ndarray, n_starts: int, seed: int) -> np.ndarray:
    """Bound-box midpoint plus a scrambled low-discrepancy fill."""
    mid = 0.5 * (bounds[:, 0] + bounds[:, 1])
    if n_starts == 1:
        return mid[None, :]
    extra = n_starts - 1
    sampler = qmc.Sobol(d=bounds.shape[0], scramble=True, seed=seed)
    m = max(1, int(np.ceil(np.log2(extra))))
    unit = sampler.random_base2(m)[:extra]
    pts = qmc.scale(unit, bounds[:, 0], bounds[:, 1])
    return np.vstack([mid[None, :], pts])


def nlls_fit(
    data: TimeSeriesData,
    model,
    x0,
    n_starts: int = 8,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    max_iter: int = 4000,
) -> NllsFit:
    """Minimize the simulation sum of squared residuals over the bound box.

    ``x0`` is the known initial compartment state at t=0.  Starts that
    fail to integrate score infinity; if every start does, an
    optimization-failure error is raised.  The returned residual is
    never larger than the residual at any start point.
    """
    if data.n_times < 1:
        raise DomainError("observations must be nonempty")
    if n_starts < 1:
        raise DomainError("n_starts must be at least 1")
    if tuple(model.state_names) != tuple(data.state_names):
        raise StructuralError("model and data state names differ")
    pop = PopulationConfig(sizes=[data.population])
    times = data.times
    grid = times if times[0] == 0.0 else np.concatenate([[0.0], times])
    bounds = model.bounds_array()

    def objective(theta: np.ndarray) -> float:
        try:
            traj = simulate(model, pop, theta, x0, grid, step=step)
        except (IntegrationError, DomainError):
            return np.inf
        pred = traj.restrict(times).states[:, 0, :].T
        resid = pred - data.values
        return float(np.sum(resid * resid))

    box = [(lo, hi) for lo, hi in bounds]
    starts = _start_points(bounds, n_starts, seed)
    start_residuals = []
    best_val, best_theta = np.inf, None
    # coarse pass on every start, tight polish only on the winner
    for x_start in starts:
        val0 = objective(x_start)
        start_residuals.append(val0)
        if val0 < best_val:
            best_val, best_theta = val0, np.array(x_start)
        if not np.isfinite(val0):
            continue
        res = minimize(
            objective,
            x_start,
            method="Nelder-Mead",
            bounds=box,
            options={"maxiter": min(500, max_iter), "xatol": 1e-4, "fatol": 1e-6},
        )
        if np.isfinite(res.fun) and res.fun < best_val:
            best_val, best_theta = float(res.fun), np.array(res.x)
    if best_theta is None or not np.isfinite(best_val):
        raise OptimizationError("every start point failed to integrate")
    res = minimize(
        objective,
        best_theta,
        method="Nelder-Mead",
        bounds=box,
        options={"maxiter": max_iter, "xatol": 1e-8, "fatol": 1e-12},
    )
    if np.isfinite(res.fun) and res.fun < best_val:
        best_val, best_theta = float(res.fun), np.array(res.x)
    return NllsFit(
        param_names=tuple(model.param_names),
        theta=best_theta,
        residual=best_val,
        start_residuals=tuple(start_residuals),
        seed=seed,
    )
