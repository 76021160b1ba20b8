"""Compartmental epidemic models and a fixed-step RK4 integrator.

Four model families are provided:

``SEIR``
    susceptible / exposed / infected / recovered, with free rates
    ``alpha`` (transmission), ``beta`` (incubation), ``gamma`` (recovery).
``SEIRM``
    SEIR plus an immunized compartment ``M`` fed by vaccination.  The
    susceptible/exposed flows gain three extensions: a sigmoid onset gate
    ``u_k(t)`` per subpopulation, a mobility-weighted sum of infected
    across subpopulations, and removal of effectively vaccinated
    individuals (``eta`` = vaccine efficacy).
``SEPIHR``
    adds pre-symptomatic ``P`` and hospitalized ``H`` compartments; free
    rates ``alpha, beta, delta1, gamma1, gamma2`` with fixed defaults for
    ``delta2, delta3, gamma3``.
``SEPIHRM``
    SEPIHR with the same vaccination/mobility/onset extension as SEIRM.

Every family conserves the per-subpopulation total: the compartment
derivatives of each subpopulation sum to zero identically, so the
integrator preserves ``sum(compartments) == N_k`` up to floating-point
roundoff.  Vaccination is not gated on susceptible availability, so a
large policy can drive ``S`` transiently negative; such states are left
untouched (clamping them would inject mass and break conservation).
Integration aborts only on non-finite states.

All derivative arithmetic is elementwise (mobility coupling is an
explicit fixed-order loop over subpopulations, never a BLAS reduction),
so results are bit-identical regardless of how simulations are batched.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import DomainError, IntegrationError, StructuralError

DEFAULT_STEP = 0.05
CONSERVATION_RTOL = 1e-8
NEGATIVE_SLACK = 1e-9  # relative to subpopulation size

_SEPIHR_FIXED = {"delta2": 0.002, "delta3": 0.002, "gamma3": 0.06}

_FAMILIES: dict[str, dict] = {
    "SEIR": {
        "states": ("S", "E", "I", "R"),
        "params": ("alpha", "beta", "gamma"),
        "fixed": {},
    },
    "SEIRM": {
        "states": ("S", "E", "I", "R", "M"),
        "params": ("alpha", "beta", "gamma"),
        "fixed": {},
    },
    "SEPIHR": {
        "states": ("S", "E", "P", "I", "H", "R"),
        "params": ("alpha", "beta", "delta1", "gamma1", "gamma2"),
        "fixed": dict(_SEPIHR_FIXED),
    },
    "SEPIHRM": {
        "states": ("S", "E", "P", "I", "H", "R", "M"),
        "params": ("alpha", "beta", "delta1", "gamma1", "gamma2"),
        "fixed": dict(_SEPIHR_FIXED),
    },
}

_DEFAULT_BOUNDS = {"alpha": (0.0, 2.0)}  # every other rate lives in [0, 1]


def sigmoid_onset(c1, c2, t):
    """Logistic onset gate ``1 / (1 + exp(-c1 * (t - c2)))``.

    ``c1`` controls steepness, ``c2`` is the midpoint (the gate equals
    0.5 at ``t == c2``).  Accepts scalars or broadcastable arrays and is
    numerically stable for large arguments.
    """
    c1 = np.asarray(c1, dtype=float)
    if np.any(c1 < 0):
        raise DomainError("onset steepness c1 must be nonnegative")
    return expit(c1 * (np.asarray(t, dtype=float) - np.asarray(c2, dtype=float)))


@dataclass(frozen=True)
class ModelSpec:
    """Identity of a model family plus its parameter metadata.

    Attributes
    ----------
    kind : str
        One of ``SEIR``, ``SEIRM``, ``SEPIHR``, ``SEPIHRM``.
    state_names : tuple of str
        Compartment labels in integration order.
    param_names : tuple of str
        Free-parameter labels in the order used by parameter vectors.
    param_bounds : dict
        ``name -> (low, high)`` box bounds for every free parameter.
    fixed_params : dict
        Rates held constant (SEPIHR's ``delta2, delta3, gamma3``).
    """

    kind: str
    state_names: tuple[str, ...]
    param_names: tuple[str, ...]
    param_bounds: dict[str, tuple[float, float]]
    fixed_params: dict[str, float]

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def has_immunized(self) -> bool:
        return self.kind.endswith("M")

    def base(self) -> "ModelSpec":
        """The family without the immunized compartment (no-op if already base)."""
        if not self.has_immunized:
            return self
        return replace(
            self,
            kind=self.kind[:-1],
            state_names=self.state_names[:-1],
        )

    def with_immunity(self) -> "ModelSpec":
        """The matching M-variant family (no-op if already an M-variant)."""
        if self.has_immunized:
            return self
        return replace(
            self,
            kind=self.kind + "M",
            state_names=self.state_names + ("M",),
        )

    def bounds_array(self) -> np.ndarray:
        """Free-parameter bounds as an ``(n_params, 2)`` array."""
        return np.array([self.param_bounds[p] for p in self.param_names], dtype=float)

    def theta_array(self, theta) -> np.ndarray:
        """Coerce a mapping or sequence of free parameters to a 1-D array."""
        if isinstance(theta, Mapping):
            missing = [p for p in self.param_names if p not in theta]
            if missing:
                raise StructuralError(f"missing parameters: {missing}")
            vec = np.array([float(theta[p]) for p in self.param_names])
        else:
            vec = np.asarray(theta, dtype=float).ravel()
            if vec.size != self.n_params:
                raise StructuralError(
                    f"{self.kind} expects {self.n_params} parameters, got {vec.size}"
                )
        if not np.all(np.isfinite(vec)):
            raise DomainError("parameters must be finite")
        return vec

    def validate_theta(self, theta) -> np.ndarray:
        vec = self.theta_array(theta)
        for name, value in zip(self.param_names, vec):
            lo, hi = self.param_bounds[name]
            if not lo <= value <= hi:
                raise DomainError(
                    f"parameter {name}={value:g} outside bounds [{lo:g}, {hi:g}]"
                )
        return vec

    def derivatives(self, states: np.ndarray, theta, population: float) -> np.ndarray:
        """Autonomous single-subpopulation derivatives for gradient matching.

        Parameters
        ----------
        states : ndarray, shape (n_states, n_times)
            One row per compartment.
        theta : mapping or sequence
            Free parameters.
        population : float
            Subpopulation size ``N``.

        Returns
        -------
        ndarray of the same shape as ``states``.

        Only the base (non-M) families are autonomous; M-variants depend
        on time and a policy and are rejected.
        """
        if self.has_immunized:
            raise DomainError(
                f"{self.kind} is driven by vaccination and onset timing; "
                "derivative matching applies to the base families only"
            )
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[0] != self.n_states:
            raise StructuralError(
                f"states must have shape ({self.n_states}, n_times)"
            )
        vec = self.theta_array(theta)
        deriv = make_autonomous_deriv(self, float(population))
        states_ts = np.ascontiguousarray(states.T)
        out = np.empty_like(states_ts)
        deriv(states_ts, vec, out)
        return np.ascontiguousarray(out.T)


def make_autonomous_deriv(model, population: float):
    """Build a fast ``deriv(states, theta, out)`` evaluator for one model.

    ``states`` and ``out`` are laid out ``(n_times, n_states)`` so rows can
    be updated in place by sampling loops.  Falls back to the model's own
    ``derivatives`` method for duck-typed models outside the built-in
    registry.
    """
    if getattr(model, "has_immunized", False):
        raise DomainError(
            "derivative evaluation for sampling applies to the base families only"
        )
    kind = getattr(model, "kind", None)
    if kind in _RHS:
        fn = _RHS[kind]
        names = model.param_names
        fixed = dict(model.fixed_params)
        ctx = _SimContext(
            inv_n=np.array([1.0 / float(population)]),
            mobility=None,
            onset_c1=None,
            onset_c2=None,
            eta=0.0,
            vacc=None,
        )

        def deriv(states: np.ndarray, theta: np.ndarray, out: np.ndarray) -> np.ndarray:
            pars = dict(zip(names, theta))
            pars.update(fixed)
            fn(out[:, None, :], states[:, None, :], 0.0, pars, ctx)
            return out

        return deriv

    def deriv(states: np.ndarray, theta: np.ndarray, out: np.ndarray) -> np.ndarray:
        out[:] = model.derivatives(states.T, theta, population).T
        return out

    return deriv


def model_spec(kind: str, fixed_params: Mapping[str, float] | None = None) -> ModelSpec:
    """Construct the :class:`ModelSpec` for one of the four families."""
    if kind not in _FAMILIES:
        raise DomainError(
            f"unknown model kind {kind!r}; expected one of {sorted(_FAMILIES)}"
        )
    fam = _FAMILIES[kind]
    fixed = dict(fam["fixed"])
    if fixed_params:
        unknown = set(fixed_params) - set(fixed)
        if unknown:
            raise DomainError(f"{kind} has no fixed parameters {sorted(unknown)}")
        fixed.update({k: float(v) for k, v in fixed_params.items()})
    bounds = {
        name: _DEFAULT_BOUNDS.get(name, (0.0, 1.0)) for name in fam["params"]
    }
    return ModelSpec(
        kind=kind,
        state_names=fam["states"],
        param_names=fam["params"],
        param_bounds=bounds,
        fixed_params=fixed,
    )


@dataclass(frozen=True)
class PopulationConfig:
    """Subpopulation sizes plus the coupling/vaccination context.

    Attributes
    ----------
    sizes : ndarray, shape (K,)
        Subpopulation sizes ``N_k`` (strictly positive).
    names : tuple of str
        Labels, default ``pop1..popK``.
    mobility : ndarray, shape (K, K)
        Coupling weights; entry ``[r, k]`` scales how subpopulation
        ``r``'s infected contribute to infections in ``k``.  Unit
        diagonal, nonnegative entries.  Defaults to the identity.
    onset_c1, onset_c2 : ndarray of shape (K,) or None
        Sigmoid onset steepness / midpoint per subpopulation.  ``None``
        disables gating (gate identically 1).
    eta : float
        Vaccine efficacy in [0, 1].
    """

    sizes: np.ndarray
    names: tuple[str, ...] = ()
    mobility: np.ndarray | None = None
    onset_c1: np.ndarray | None = None
    onset_c2: np.ndarray | None = None
    eta: float = 0.99

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=float).ravel()
        if sizes.size == 0 or np.any(~np.isfinite(sizes)) or np.any(sizes <= 0):
            raise DomainError("subpopulation sizes must be positive and finite")
        object.__setattr__(self, "sizes", sizes)
        if not self.names:
            object.__setattr__(
                self, "names", tuple(f"pop{i + 1}" for i in range(sizes.size))
            )
        elif len(self.names) != sizes.size:
            raise StructuralError("names/sizes length mismatch")
        if self.mobility is not None:
            mob = np.asarray(self.mobility, dtype=float)
            if mob.shape != (sizes.size, sizes.size):
                raise StructuralError("mobility must be K x K")
            if np.any(mob < 0) or not np.allclose(np.diag(mob), 1.0, atol=1e-12):
                raise DomainError(
                    "mobility entries must be nonnegative with a unit diagonal"
                )
            object.__setattr__(self, "mobility", mob)
        for attr in ("onset_c1", "onset_c2"):
            val = getattr(self, attr)
            if val is not None:
                arr = np.asarray(val, dtype=float).ravel()
                if arr.size != sizes.size:
                    raise StructuralError(f"{attr} must have one entry per subpopulation")
                object.__setattr__(self, attr, arr)
        if self.onset_c1 is not None and np.any(self.onset_c1 < 0):
            raise DomainError("onset_c1 must be nonnegative")
        if (self.onset_c1 is None) != (self.onset_c2 is None):
            raise StructuralError("onset_c1 and onset_c2 must be given together")
        if not 0.0 <= self.eta <= 1.0:
            raise DomainError("eta must lie in [0, 1]")

    @property
    def n_pops(self) -> int:
        return self.sizes.size

    def with_onset_midpoints(self, c2) -> "PopulationConfig":
        """Copy of this config with replaced onset midpoints."""
        c2 = np.asarray(c2, dtype=float).ravel()
        c1 = self.onset_c1
        if c1 is None:
            c1 = np.full(self.n_pops, 0.6)
        return replace(self, onset_c1=c1, onset_c2=c2)


@dataclass(frozen=True)
class VaccinePolicy:
    """Daily vaccination doses per subpopulation over a window.

    ``doses[k, j]`` is the dose rate (doses/day, held constant over the
    day) for subpopulation ``k`` on day ``window[0] + j``.  Days outside
    ``[window[0], window[1]]`` are implicitly zero.
    """

    window: tuple[int, int]
    doses: np.ndarray

    def __post_init__(self):
        start, end = int(self.window[0]), int(self.window[1])
        if start < 0 or end < start:
            raise DomainError("window must satisfy 0 <= start <= end")
        object.__setattr__(self, "window", (start, end))
        doses = np.atleast_2d(np.asarray(self.doses, dtype=float))
        if doses.shape[1] != end - start + 1:
            raise StructuralError(
                f"doses must have {end - start + 1} columns for window {self.window}"
            )
        if not np.all(np.isfinite(doses)):
            raise DomainError("doses must be finite")
        object.__setattr__(self, "doses", doses)

    @property
    def n_pops(self) -> int:
        return self.doses.shape[0]

    @property
    def n_days(self) -> int:
        return self.doses.shape[1]

    @classmethod
    def zero(cls, n_pops: int, window: tuple[int, int]) -> "VaccinePolicy":
        width = int(window[1]) - int(window[0]) + 1
        return cls(window=window, doses=np.zeros((n_pops, width)))

    def daily_rates(self, n_days: int) -> np.ndarray:
        """Expand to a dense ``(K, n_days)`` array over days ``0..n_days-1``."""
        rates = np.zeros((self.n_pops, int(n_days)))
        start, end = self.window
        lo, hi = max(start, 0), min(end + 1, int(n_days))
        if hi > lo:
            rates[:, lo:hi] = self.doses[:, lo - start : hi - start]
        return rates


@dataclass(frozen=True)
class Trajectory:
    """Simulated states on an output grid: ``states[i, k, s]`` at ``grid[i]``."""

    grid: np.ndarray
    states: np.ndarray
    state_names: tuple[str, ...]
    pop_names: tuple[str, ...]

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float).ravel()
        states = np.asarray(self.states, dtype=float)
        if np.any(np.diff(grid) <= 0):
            raise DomainError("grid must be strictly increasing")
        if states.shape != (grid.size, len(self.pop_names), len(self.state_names)):
            raise StructuralError("states must have shape (n_times, n_pops, n_states)")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "states", states)

    def conservation_error(self, sizes) -> float:
        """Largest relative deviation of per-subpopulation totals from ``N_k``."""
        sizes = np.asarray(sizes, dtype=float).ravel()
        totals = self.states.sum(axis=2)
        return float(np.max(np.abs(totals - sizes) / sizes))

    def restrict(self, times) -> "Trajectory":
        """Sub-trajectory at the requested grid times (must already be on the grid)."""
        times = np.asarray(times, dtype=float).ravel()
        idx = np.searchsorted(self.grid, times)
        bad = (idx >= self.grid.size) | ~np.isclose(
            self.grid[np.minimum(idx, self.grid.size - 1)], times
        )
        if np.any(bad):
            raise DomainError(f"times {times[bad]} are not on the trajectory grid")
        return Trajectory(
            grid=self.grid[idx],
            states=self.states[idx],
            state_names=self.state_names,
            pop_names=self.pop_names,
        )

    def columns(self) -> list[str]:
        return [f"{p}_{s}" for p in self.pop_names for s in self.state_names]

    def to_csv(self, path, header_comment: str | None = None) -> None:
        """Write ``t,<subpop>_<state>,...`` rows with full double precision."""
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["t"] + self.columns())
            flat = self.states.reshape(self.grid.size, -1)
            for t, row in zip(self.grid, flat):
                writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path, state_names, pop_names) -> "Trajectory":
        grid, rows = _read_numeric_csv(path)
        states = rows.reshape(grid.size, len(pop_names), len(state_names))
        return cls(
            grid=grid,
            states=states,
            state_names=tuple(state_names),
            pop_names=tuple(pop_names),
        )


@dataclass(frozen=True)
class TimeSeriesData:
    """Noisy per-state observations of a single subpopulation.

    ``values[s, i]`` observes state ``state_names[s]`` at ``times[i]``.
    ``population`` records the subpopulation size the series came from
    (the models need ``N`` to evaluate derivatives).
    """

    times: np.ndarray
    values: np.ndarray
    state_names: tuple[str, ...]
    population: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if np.any(np.diff(times) <= 0):
            raise DomainError("observation times must be strictly increasing")
        if values.shape != (len(self.state_names), times.size):
            raise StructuralError("values must have shape (n_states, n_times)")
        if not np.all(np.isfinite(values)):
            raise DomainError("observations must be finite")
        if self.population <= 0:
            raise DomainError("population must be positive")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_times(self) -> int:
        return self.times.size

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["t"] + list(self.state_names))
            for i, t in enumerate(self.times):
                writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in self.values[:, i]])

    @classmethod
    def from_csv(cls, path, population: float) -> "TimeSeriesData":
        times, rows = _read_numeric_csv(path)
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    names = tuple(line.strip().split(",")[1:])
                    break
        return cls(
            times=times, values=rows.T, state_names=names, population=population
        )


def _read_numeric_csv(path):
    times, rows = [], []
    with open(path) as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        next(reader)  # header
        for rec in reader:
            times.append(float(rec[0]))
            rows.append([float(v) for v in rec[1:]])
    return np.asarray(times), np.asarray(rows)


# --------------------------------------------------------------------------
# Derivative kernels.
#
# Each kernel writes dX/dt into `out` for a batch of states X with shape
# (B, K, n_states).  Parameter entries are floats or (B, 1) arrays so they
# broadcast over subpopulations.  All arithmetic is elementwise with a
# fixed association order, independent of the batch size B.
# --------------------------------------------------------------------------


@dataclass
class _SimContext:
    inv_n: np.ndarray              # (K,) reciprocal subpopulation sizes
    mobility: np.ndarray | None    # (K, K) or None for identity coupling
    onset_c1: np.ndarray | None    # (K,)
    onset_c2: np.ndarray | None    # (K,) or (B, K)
    eta: float
    vacc: np.ndarray | None        # (K,) or (B, K) dose rates, set per stage


def _coupled_infected(infected: np.ndarray, mobility: np.ndarray | None) -> np.ndarray:
    """``out[:, k] = sum_r infected[:, r] * mobility[r, k]`` in fixed order."""
    if mobility is None:
        return infected
    n_pops = infected.shape[-1]
    out = np.empty_like(infected)
    for k in range(n_pops):
        acc = infected[..., 0] * mobility[0, k]
        for r in range(1, n_pops):
            acc = acc + infected[..., r] * mobility[r, k]
        out[..., k] = acc
    return out


def _onset_gate(ctx: _SimContext, t: float):
    if ctx.onset_c1 is None:
        return 1.0
    return expit(ctx.onset_c1 * (t - ctx.onset_c2))


def _effective_vaccination(ctx: _SimContext):
    if ctx.vacc is None:
        return 0.0
    return ctx.eta * ctx.vacc


def _rhs_seir(out, states, t, pars, ctx):
    s, e, i = states[..., 0], states[..., 1], states[..., 2]
    new_inf = pars["alpha"] * ctx.inv_n * s * i
    incubating = pars["beta"] * e
    recovering = pars["gamma"] * i
    out[..., 0] = -new_inf
    out[..., 1] = new_inf - incubating
    out[..., 2] = incubating - recovering
    out[..., 3] = recovering


def _rhs_seirm(out, states, t, pars, ctx):
    s, e, i = states[..., 0], states[..., 1], states[..., 2]
    vacc = _effective_vaccination(ctx)
    gate = _onset_gate(ctx, t)
    pressure = _coupled_infected(i, ctx.mobility)
    new_inf = gate * (pars["alpha"] * ctx.inv_n) * (s - vacc) * pressure
    incubating = pars["beta"] * e
    recovering = pars["gamma"] * i
    out[..., 0] = -vacc - new_inf
    out[..., 1] = new_inf - incubating
    out[..., 2] = incubating - recovering
    out[..., 3] = recovering
    out[..., 4] = vacc if ctx.vacc is not None else 0.0


def _sepihr_flows(out, states, new_inf, pars):
    e, p, i, h = states[..., 1], states[..., 2], states[..., 3], states[..., 4]
    to_infected = pars["beta"] * e
    to_presymp = pars["delta1"] * e
    p_to_hosp = pars["delta2"] * p
    p_recover = pars["gamma2"] * p
    i_to_hosp = pars["delta3"] * i
    i_recover = pars["gamma1"] * i
    h_recover = pars["gamma3"] * h
    out[..., 1] = new_inf - to_infected - to_presymp
    out[..., 2] = to_presymp - p_to_hosp - p_recover
    out[..., 3] = to_infected - i_recover - i_to_hosp
    out[..., 4] = p_to_hosp + i_to_hosp - h_recover
    out[..., 5] = i_recover + p_recover + h_recover


def _rhs_sepihr(out, states, t, pars, ctx):
    s, i = states[..., 0], states[..., 3]
    new_inf = pars["alpha"] * ctx.inv_n * s * i
    out[..., 0] = -new_inf
    _sepihr_flows(out, states, new_inf, pars)


def _rhs_sepihrm(out, states, t, pars, ctx):
    s, i = states[..., 0], states[..., 3]
    vacc = _effective_vaccination(ctx)
    gate = _onset_gate(ctx, t)
    pressure = _coupled_infected(i, ctx.mobility)
    new_inf = gate * (pars["alpha"] * ctx.inv_n) * (s - vacc) * pressure
    out[..., 0] = -vacc - new_inf
    _sepihr_flows(out, states, new_inf, pars)
    out[..., 6] = vacc if ctx.vacc is not None else 0.0


_RHS: dict[str, Callable] = {
    "SEIR": _rhs_seir,
    "SEIRM": _rhs_seirm,
    "SEPIHR": _rhs_sepihr,
    "SEPIHRM": _rhs_sepihrm,
}


def rhs(
    model: ModelSpec,
    pop: PopulationConfig,
    theta,
    state: np.ndarray,
    t: float = 0.0,
    vaccine_rates: np.ndarray | None = None,
) -> np.ndarray:
    """Time derivative of a single ``(K, n_states)`` state.

    ``vaccine_rates`` gives current doses/day per subpopulation for
    M-variants (ignored otherwise).  Parameters are validated against
    the model's bounds.
    """
    vec = model.validate_theta(theta)
    state = np.asarray(state, dtype=float)
    if state.ndim == 1:
        state = state[None, :]
    if state.shape != (pop.n_pops, model.n_states):
        raise StructuralError(
            f"state must have shape ({pop.n_pops}, {model.n_states}), got {state.shape}"
        )
    pars = {n: float(v) for n, v in zip(model.param_names, vec)}
    pars.update(model.fixed_params)
    vacc = None
    if model.has_immunized and vaccine_rates is not None:
        vacc = np.asarray(vaccine_rates, dtype=float).ravel()
        if vacc.size != pop.n_pops:
            raise StructuralError("vaccine_rates must have one entry per subpopulation")
    ctx = _SimContext(
        inv_n=1.0 / pop.sizes,
        mobility=pop.mobility,
        onset_c1=pop.onset_c1,
        onset_c2=pop.onset_c2,
        eta=pop.eta,
        vacc=vacc,
    )
    batch = state[None, :, :]
    out = np.empty_like(batch)
    _RHS[model.kind](out, batch, float(t), pars, ctx)
    return out[0]


# --------------------------------------------------------------------------
# Fixed-step RK4 integration.
# --------------------------------------------------------------------------


def _substeps(t0: float, t1: float, step: float) -> int:
    return max(1, int(round((t1 - t0) / step)))


def integrate_batch(
    model: ModelSpec,
    ctx: _SimContext,
    pars: Mapping[str, object],
    x0: np.ndarray,
    grid: np.ndarray,
    step: float,
    rate_table: np.ndarray | None,
    on_sample: Callable[[int, np.ndarray], None],
) -> np.ndarray:
    """Advance a batch of states over ``grid``, reporting each grid point.

    ``x0`` has shape (B, K, n_states); ``pars`` values are floats or
    (B, 1) arrays; ``rate_table`` is a dense (K, n_days) or (B, K,
    n_days) dose-rate table indexed by ``floor(t)``.  ``on_sample(i,
    states)`` is called for every grid index, starting at 0.  Returns
    ``(failed, fail_times)``: rows that went non-finite are reported in
    the boolean mask with the first bad grid time, and are frozen at
    zero so consumers never observe non-finite values.
    """
    deriv = _RHS[model.kind]
    x = np.array(x0, dtype=float)
    buf = [np.empty_like(x) for _ in range(5)]
    k1, k2, k3, k4, mid = buf
    failed = np.zeros(x.shape[0], dtype=bool)
    fail_times = np.full(x.shape[0], np.nan)
    n_days = rate_table.shape[-1] if rate_table is not None else 0

    def set_vacc(t: float):
        if rate_table is None:
            ctx.vacc = None
        else:
            day = min(int(t), n_days - 1)
            ctx.vacc = rate_table[..., day]

    on_sample(0, x)
    with np.errstate(over="ignore", invalid="ignore"):
        return _integrate_loop(
            deriv, x, grid, step, pars, ctx, buf, failed, fail_times,
            rate_table, n_days, set_vacc, on_sample,
        )


def _integrate_loop(
    deriv, x, grid, step, pars, ctx, buf, failed, fail_times,
    rate_table, n_days, set_vacc, on_sample,
):
    k1, k2, k3, k4, mid = buf
    for i in range(grid.size - 1):
        t0, t1 = grid[i], grid[i + 1]
        span = t1 - t0
        nsub = _substeps(t0, t1, step)
        h = span / nsub
        for j in range(nsub):
            ta = t0 + span * (j / nsub)
            tm = ta + 0.5 * h
            tb = t0 + span * ((j + 1) / nsub)
            set_vacc(ta)
            deriv(k1, x, ta, pars, ctx)
            np.multiply(k1, 0.5 * h, out=mid)
            mid += x
            set_vacc(tm)
            deriv(k2, mid, tm, pars, ctx)
            np.multiply(k2, 0.5 * h, out=mid)
            mid += x
            deriv(k3, mid, tm, pars, ctx)
            np.multiply(k3, h, out=mid)
            mid += x
            set_vacc(tb)
            deriv(k4, mid, tb, pars, ctx)
            k2 += k3
            k2 *= 2.0
            k1 += k4
            k1 += k2
            k1 *= h / 6.0
            x += k1
        bad = ~np.isfinite(x).all(axis=(1, 2))
        newly = bad & ~failed
        if newly.any():
            failed |= newly
            fail_times[newly] = t1
        if failed.any():
            x[failed] = 0.0
        on_sample(i + 1, x)
        if failed.all():
            for rest in range(i + 2, grid.size):
                on_sample(rest, x)
            break
    return failed, fail_times


def simulate(
    model: ModelSpec,
    pop: PopulationConfig,
    theta,
    x0: np.ndarray,
    grid,
    policy: VaccinePolicy | None = None,
    step: float = DEFAULT_STEP,
) -> Trajectory:
    """Integrate the model with classical fixed-step RK4.

    Parameters
    ----------
    theta : mapping or sequence
        Free parameters, validated against bounds.
    x0 : ndarray, shape (K, n_states)
        Initial state at ``grid[0]``; per-subpopulation sums must match
        ``pop.sizes`` to within ``1e-8`` relative, entries may dip no
        lower than ``-1e-9 * N_k``.
    grid : array-like
        Strictly increasing output times starting at 0.
    policy : VaccinePolicy, optional
        Daily dose rates (M-variants only); day ``d`` covers ``[d, d+1)``.
    step : float
        Nominal RK4 step; each grid interval is split into
        ``round(interval / step)`` equal substeps.

    Raises
    ------
    IntegrationError
        If the state becomes non-finite, reporting the first bad grid time.
    """
    vec = model.validate_theta(theta)
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise DomainError("grid must contain at least two strictly increasing times")
    if grid[0] != 0.0:
        raise DomainError("grid must start at t=0")
    if step <= 0:
        raise DomainError("step must be positive")
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1 and pop.n_pops == 1:
        x0 = x0[None, :]
    if x0.shape != (pop.n_pops, model.n_states):
        raise StructuralError(
            f"x0 must have shape ({pop.n_pops}, {model.n_states}), got {x0.shape}"
        )
    sums = x0.sum(axis=1)
    if np.any(np.abs(sums - pop.sizes) > CONSERVATION_RTOL * pop.sizes):
        raise DomainError("x0 compartments must sum to the subpopulation sizes")
    if np.any(x0 < -NEGATIVE_SLACK * pop.sizes[:, None]):
        raise DomainError("x0 compartments must be nonnegative (within slack)")

    pars = {n: float(v) for n, v in zip(model.param_names, vec)}
    pars.update(model.fixed_params)
    rate_table = None
    if policy is not None and model.has_immunized:
        if policy.n_pops != pop.n_pops:
            raise StructuralError("policy and population subpopulation counts differ")
        rate_table = policy.daily_rates(int(math.floor(grid[-1])) + 1)
    ctx = _SimContext(
        inv_n=1.0 / pop.sizes,
        mobility=pop.mobility,
        onset_c1=pop.onset_c1,
        onset_c2=pop.onset_c2,
        eta=pop.eta,
        vacc=None,
    )
    out = np.empty((grid.size, pop.n_pops, model.n_states))

    def take(i, states):
        out[i] = states[0]

    failed, fail_times = integrate_batch(
        model, ctx, pars, x0[None, :, :], grid, step, rate_table, take
    )
    if failed[0]:
        raise IntegrationError(
            f"{model.kind} state became non-finite", fail_times[0]
        )
    return Trajectory(
        grid=grid,
        states=out,
        state_names=model.state_names,
        pop_names=pop.names,
    )


def make_batch_context(
    model: ModelSpec,
    pop: PopulationConfig,
    thetas: np.ndarray,
    onset_c2: np.ndarray | None = None,
) -> tuple[dict, _SimContext]:
    """Validated ``(pars, ctx)`` pair for integrating B parameter rows at once.

    ``thetas`` is (B, n_params), each row checked against the model
    bounds; ``onset_c2`` optionally overrides the population's onset
    midpoints with one (B, K) row per batch member.  Parameter entries
    enter the derivative kernels as (B, 1) columns so all arithmetic
    broadcasts elementwise against (B, K) states.
    """
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim != 2 or thetas.shape[1] != model.n_params:
        raise StructuralError(
            f"thetas must have shape (B, {model.n_params}), got {thetas.shape}"
        )
    bounds = model.bounds_array()
    if not np.all(np.isfinite(thetas)):
        raise DomainError("batch parameters must be finite")
    if np.any(thetas < bounds[:, 0]) or np.any(thetas > bounds[:, 1]):
        raise DomainError("a batch parameter row lies outside the model bounds")
    pars: dict = {
        name: np.ascontiguousarray(thetas[:, j : j + 1])
        for j, name in enumerate(model.param_names)
    }
    pars.update(model.fixed_params)
    c2 = pop.onset_c2
    if onset_c2 is not None:
        if pop.onset_c1 is None:
            raise DomainError(
                "per-batch onset midpoints need onset_c1 configured on the population"
            )
        c2 = np.asarray(onset_c2, dtype=float)
        if c2.shape != (thetas.shape[0], pop.n_pops):
            raise StructuralError(
                f"onset_c2 must have shape (B, {pop.n_pops}), got {c2.shape}"
            )
    ctx = _SimContext(
        inv_n=1.0 / pop.sizes,
        mobility=pop.mobility,
        onset_c1=pop.onset_c1,
        onset_c2=c2,
        eta=pop.eta,
        vacc=None,
    )
    return pars, ctx


def simulate_batch(
    model: ModelSpec,
    pop: PopulationConfig,
    thetas: np.ndarray,
    x0: np.ndarray,
    grid,
    rate_tables: np.ndarray | None = None,
    onset_c2: np.ndarray | None = None,
    step: float = DEFAULT_STEP,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integrate B parameter rows jointly; returns raw arrays, never raises
    on divergence.

    ``x0`` is one shared (K, n_states) start or a (B, K, n_states) batch;
    ``rate_tables`` is an optional (B, K, n_days) daily dose table.
    Returns ``(states, failed, fail_times)`` with states of shape
    (n_grid, B, K, n_states); rows flagged in ``failed`` are frozen at
    zero from their first non-finite grid time onward.
    """
    thetas = np.asarray(thetas, dtype=float)
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise DomainError("grid must contain at least two strictly increasing times")
    if grid[0] != 0.0:
        raise DomainError("grid must start at t=0")
    if step <= 0:
        raise DomainError("step must be positive")
    pars, ctx = make_batch_context(model, pop, thetas, onset_c2)
    b = thetas.shape[0]
    x0 = np.asarray(x0, dtype=float)
    if x0.shape == (pop.n_pops, model.n_states):
        x0 = np.broadcast_to(x0, (b, pop.n_pops, model.n_states))
    if x0.shape != (b, pop.n_pops, model.n_states):
        raise StructuralError(
            f"x0 must have shape ({pop.n_pops}, {model.n_states}) or "
            f"({b}, {pop.n_pops}, {model.n_states}), got {x0.shape}"
        )
    sums = x0.sum(axis=2)
    if np.any(np.abs(sums - pop.sizes) > CONSERVATION_RTOL * pop.sizes):
        raise DomainError("x0 compartments must sum to the subpopulation sizes")
    if np.any(x0 < -NEGATIVE_SLACK * pop.sizes[None, :, None]):
        raise DomainError("x0 compartments must be nonnegative (within slack)")
    if rate_tables is not None:
        rate_tables = np.asarray(rate_tables, dtype=float)
        if rate_tables.ndim != 3 or rate_tables.shape[:2] != (b, pop.n_pops):
            raise StructuralError(
                f"rate_tables must have shape ({b}, {pop.n_pops}, n_days)"
            )
        if not model.has_immunized:
            raise DomainError("dose tables apply to the immunized model variants only")
    out = np.empty((grid.size, b, pop.n_pops, model.n_states))

    def take(i, states):
        out[i] = states

    failed, fail_times = integrate_batch(
        model, ctx, pars, x0, grid, step, rate_tables, take
    )
    return out, failed, fail_times


def default_initial_state(
    model: ModelSpec, pop: PopulationConfig, infected: float = 100.0
) -> np.ndarray:
    """Seed each subpopulation with ``infected`` in I and the rest in S."""
    x0 = np.zeros((pop.n_pops, model.n_states))
    i_col = model.state_names.index("I")
    x0[:, i_col] = infected
    x0[:, 0] = pop.sizes - infected
    if np.any(x0[:, 0] < 0):
        raise DomainError("initial infected exceeds a subpopulation size")
    return x0


def generate_noisy_observations(
    traj: Trajectory, sigma, seed: int
) -> TimeSeriesData:
    """Additive i.i.d. Gaussian noise on a single-subpopulation trajectory.

    ``sigma`` is a scalar or one value per state.  The draw is a pure
    function of ``seed``.
    """
    if len(traj.pop_names) != 1:
        raise StructuralError(
            "observations are generated from single-subpopulation trajectories"
        )
    n_states = len(traj.state_names)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float).ravel(), (n_states,))
    if np.any(sig < 0):
        raise DomainError("sigma must be nonnegative")
    clean = traj.states[:, 0, :].T  # (n_states, n_times)
    rng = np.random.default_rng(seed)
    noisy = clean + rng.standard_normal(clean.shape) * sig[:, None]
    return TimeSeriesData(
        times=traj.grid.copy(),
        values=noisy,
        state_names=traj.state_names,
        population=float(np.sum(traj.states[0, 0, :])),
    )
