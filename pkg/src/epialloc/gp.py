"""Gaussian-process derivative matching for ODE parameter inference.

A zero-mean GP with squared-exponential covariance

    k(t, t') = sigma_f^2 * exp(-(t - t')^2 / (2 * ell^2))

is placed over each (mean-centered) state series.  Because
differentiation is linear, the derivative process is jointly Gaussian
with the states, with cross-covariance ``d k / dt`` and derivative
covariance ``d^2 k / (dt dt')``.  Conditioning the derivative on latent
state values x gives a Gaussian with mean ``m = K_dx,x K_xx^{-1} x`` and
covariance ``A = K_dx,dx - K_dx,x K_xx^{-1} K_x,dx``.

The joint (unnormalized-posterior) log density over latent states x and
ODE parameters theta combines, per state:

* a GP prior term          log N(x | 0, K_xx)
* an observation term      log N(y | x, sigma_obs^2 I)
* a matching term          log N(f(x, theta) | m, A + mismatch * I)

where f evaluates the model's derivative at the latent states and
``mismatch`` absorbs residual model/GP gradient disagreement.  A flat
prior over the parameter box adds a constant inside bounds and -inf
outside.

``K_xx`` is regularized by a fixed relative jitter (1e-10 * sigma_f^2)
before factorization; the conditional covariance is symmetrized and gets
a relative jitter of 1e-10 * trace(A)/n.  Both rules are deterministic
and part of the density definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize

from .errors import DomainError, NumericalError, StructuralError
from .models import TimeSeriesData, make_autonomous_deriv

C_JITTER_REL = 1e-10
A_JITTER_REL = 1e-10
DEFAULT_MISMATCH = 1e-2
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelMatrices:
    """Covariance blocks of the joint (state, derivative) process."""

    times: np.ndarray
    sigma_f: float
    length_scale: float
    state: np.ndarray           # Cov(x(t_i),  x(t_j))
    deriv_by_state: np.ndarray  # Cov(dx(t_i), x(t_j))
    state_by_deriv: np.ndarray  # Cov(x(t_i),  dx(t_j))
    deriv: np.ndarray           # Cov(dx(t_i), dx(t_j))

    def joint(self) -> np.ndarray:
        """The full 2n x 2n covariance of (x, dx)."""
        top = np.hstack([self.state, self.state_by_deriv])
        bottom = np.hstack([self.deriv_by_state, self.deriv])
        return np.vstack([top, bottom])


def rbf_kernel_matrices(times, sigma_f: float, length_scale: float) -> KernelMatrices:
    """Evaluate the squared-exponential kernel and its derivative blocks."""
    if sigma_f <= 0 or length_scale <= 0:
        raise DomainError("sigma_f and length_scale must be positive")
    t = np.asarray(times, dtype=float).ravel()
    if t.size < 1 or not np.all(np.isfinite(t)):
        raise DomainError("times must be finite and nonempty")
    delta = t[:, None] - t[None, :]
    ell2 = length_scale * length_scale
    base = sigma_f * sigma_f * np.exp(-(delta * delta) / (2.0 * ell2))
    d_first = -(delta / ell2) * base
    cross = (1.0 / ell2) * (1.0 - (delta * delta) / ell2) * base
    return KernelMatrices(
        times=t,
        sigma_f=float(sigma_f),
        length_scale=float(length_scale),
        state=base,
        deriv_by_state=d_first,
        state_by_deriv=-d_first,
        deriv=cross,
    )


def _cho(mat: np.ndarray, what: str):
    try:
        return cho_factor(mat, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def _logdet_from_cho(cho) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(cho[0]))))


def gp_log_marginal_likelihood(
    times, centered_values, sigma_f: float, length_scale: float, sigma_obs: float
) -> float:
    """Log marginal likelihood of centered observations under the GP.

    ``-0.5 y^T (K + sigma_obs^2 I)^{-1} y - 0.5 log|K + sigma_obs^2 I|
    - n/2 log 2 pi``.
    """
    if sigma_obs <= 0:
        raise DomainError("sigma_obs must be positive")
    y = np.asarray(centered_values, dtype=float).ravel()
    km = rbf_kernel_matrices(times, sigma_f, length_scale)
    k_noisy = km.state + (sigma_obs * sigma_obs) * np.eye(y.size)
    cho = _cho(k_noisy, "K + sigma_obs^2 I")
    alpha = cho_solve(cho, y, check_finite=False)
    return float(
        -0.5 * y.dot(alpha) - 0.5 * _logdet_from_cho(cho) - 0.5 * y.size * LOG_2PI
    )


@dataclass(frozen=True)
class GpHyperParams:
    """Per-state kernel/noise hyperparameters plus the shared mismatch variance."""

    state_names: tuple[str, ...]
    sigma_f: np.ndarray
    length_scale: np.ndarray
    sigma_obs: np.ndarray
    mismatch: float = DEFAULT_MISMATCH

    def __post_init__(self):
        n = len(self.state_names)
        for attr in ("sigma_f", "length_scale", "sigma_obs"):
            arr = np.asarray(getattr(self, attr), dtype=float).ravel()
            if arr.size != n:
                raise StructuralError(f"{attr} must have one entry per state")
            if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
                raise DomainError(f"{attr} entries must be positive and finite")
            object.__setattr__(self, attr, arr)
        if not self.mismatch >= 0:
            raise DomainError("mismatch variance must be nonnegative")

    def for_state(self, name: str) -> tuple[float, float, float]:
        i = self.state_names.index(name)
        return (
            float(self.sigma_f[i]),
            float(self.length_scale[i]),
            float(self.sigma_obs[i]),
        )

    def to_dict(self) -> dict:
        out: dict = {
            name: {
                "sigma_f": float(self.sigma_f[i]),
                "length_scale": float(self.length_scale[i]),
                "sigma_obs": float(self.sigma_obs[i]),
            }
            for i, name in enumerate(self.state_names)
        }
        out["lambda"] = float(self.mismatch)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "GpHyperParams":
        names = tuple(k for k in payload if isinstance(payload[k], dict))
        if not names:
            raise StructuralError("no per-state hyperparameter entries found")
        return cls(
            state_names=names,
            sigma_f=[payload[n]["sigma_f"] for n in names],
            length_scale=[payload[n]["length_scale"] for n in names],
            sigma_obs=[payload[n]["sigma_obs"] for n in names],
            mismatch=float(payload.get("lambda", DEFAULT_MISMATCH)),
        )

    def aligned_to(self, names) -> "GpHyperParams":
        """Copy with states reordered to ``names``.

        Serialized payloads may come back with key order scrambled (JSON
        writers often sort keys); this restores the order the consuming
        data set expects.
        """
        names = tuple(names)
        if sorted(names) != sorted(self.state_names):
            raise StructuralError("state names differ")
        triples = [self.for_state(n) for n in names]
        return GpHyperParams(
            state_names=names,
            sigma_f=[t[0] for t in triples],
            length_scale=[t[1] for t in triples],
            sigma_obs=[t[2] for t in triples],
            mismatch=self.mismatch,
        )


def fit_gp_hyperparams(
    data: TimeSeriesData, mismatch: float = DEFAULT_MISMATCH
) -> GpHyperParams:
    """Per-state maximum marginal likelihood over a deterministic start grid.

    Each state series is centered by its mean; (sigma_f, length_scale,
    sigma_obs) are optimized in log space with L-BFGS-B from a small
    grid of starts.  The returned point's likelihood is at least that of
    every start.
    """
    if data.n_times < 3:
        raise DomainError("hyperparameter fitting needs at least 3 observations")
    t = data.times
    span = float(t[-1] - t[0])
    dt_min = float(np.min(np.diff(t)))
    sigma_f, length_scale, sigma_obs = [], [], []
    for i, _name in enumerate(data.state_names):
        y = data.values[i]
        yc = y - y.mean()
        scale = max(float(np.std(yc)), 1e-9)
        lo = np.log([1e-4 * scale, 0.5 * dt_min, 1e-4 * scale])
        hi = np.log([1e3 * scale, 10.0 * span, 10.0 * scale])

        def neg(params):
            sf, ell, so = np.exp(params)
            try:
                return -gp_log_marginal_likelihood(t, yc, sf, ell, so)
            except NumericalError:
                return 1e12

        best_val, best_point = np.inf, None
        for sf0 in (0.5 * scale, scale, 2.0 * scale):
            for ell0 in (span / 8.0, span / 3.0, span):
                for so0 in (0.05 * scale, 0.3 * scale):
                    x0 = np.clip(np.log([sf0, ell0, so0]), lo, hi)
                    start_val = neg(x0)
                    if start_val < best_val:
                        best_val, best_point = start_val, x0
                    res = minimize(
                        neg,
                        x0,
                        method="L-BFGS-B",
                        bounds=list(zip(lo, hi)),
                    )
                    if res.fun < best_val:
                        best_val, best_point = res.fun, res.x
        sf, ell, so = np.exp(best_point)
        sigma_f.append(sf)
        length_scale.append(ell)
        sigma_obs.append(so)
    return GpHyperParams(
        state_names=data.state_names,
        sigma_f=sigma_f,
        length_scale=length_scale,
        sigma_obs=sigma_obs,
        mismatch=mismatch,
    )


def _conditional_pieces(km: KernelMatrices):
    """Projector and conditional covariance of the derivative given states."""
    n = km.times.size
    k_reg = km.state + (C_JITTER_REL * km.sigma_f**2) * np.eye(n)
    cho = _cho(k_reg, "state covariance (beyond jitter)")
    # proj = K_dx,x K_xx^{-1}; solve on the transpose block, then transpose
    proj = cho_solve(cho, km.state_by_deriv, check_finite=False).T
    cond = km.deriv - proj @ km.state_by_deriv
    cond = 0.5 * (cond + cond.T)
    cond += (A_JITTER_REL * np.trace(cond) / n) * np.eye(n)
    return cho, proj, cond


def gp_conditional_derivative(
    x, times, sigma_f: float, length_scale: float
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the GP derivative conditioned on states ``x``.

    ``x`` is assumed already centered (zero-mean process).
    """
    x = np.asarray(x, dtype=float).ravel()
    km = rbf_kernel_matrices(times, sigma_f, length_scale)
    if x.size != km.times.size:
        raise StructuralError("x and times must have equal length")
    _, proj, cond = _conditional_pieces(km)
    return proj @ x, cond


class DensityWorkspace:
    """Precomputed factorizations for repeated joint-density evaluation.

    Holds, per state: the regularized GP covariance inverse, the
    derivative projector, and the inverse of the matching covariance
    ``A + mismatch * I``, plus the Gaussian normalization constants.
    """

    def __init__(self, data: TimeSeriesData, hyper: GpHyperParams, model):
        if tuple(hyper.state_names) != tuple(data.state_names):
            raise StructuralError("hyperparameter and data state names differ")
        if tuple(model.state_names) != tuple(data.state_names):
            raise StructuralError("model and data state names differ")
        self.data = data
        self.hyper = hyper
        self.model = model
        self.times = data.times
        self.n_times = data.n_times
        self.n_states = len(data.state_names)
        self.deriv = make_autonomous_deriv(model, data.population)
        self.bounds = model.bounds_array()
        self.centers = data.values.mean(axis=1)

        n = self.n_times
        eye = np.eye(n)
        self.k_inv, self.proj, self.match_inv = [], [], []
        self.sigma2 = hyper.sigma_obs**2
        self.const_prior = np.empty(self.n_states)
        self.const_obs = np.empty(self.n_states)
        self.const_match = np.empty(self.n_states)
        for k in range(self.n_states):
            km = rbf_kernel_matrices(
                self.times, hyper.sigma_f[k], hyper.length_scale[k]
            )
            cho, proj, cond = _conditional_pieces(km)
            self.k_inv.append(cho_solve(cho, eye, check_finite=False))
            self.proj.append(proj)
            match = cond + hyper.mismatch * eye
            cho3 = _cho(match, "matching covariance")
            self.match_inv.append(cho_solve(cho3, eye, check_finite=False))
            self.const_prior[k] = -0.5 * _logdet_from_cho(cho) - 0.5 * n * LOG_2PI
            self.const_obs[k] = -0.5 * n * (
                LOG_2PI + math.log(self.sigma2[k])
            )
            self.const_match[k] = -0.5 * _logdet_from_cho(cho3) - 0.5 * n * LOG_2PI

    def theta_in_bounds(self, theta: np.ndarray) -> bool:
        return bool(
            np.all(theta >= self.bounds[:, 0]) and np.all(theta <= self.bounds[:, 1])
        )

    def initial_latent(self) -> np.ndarray:
        """GP posterior mean of each state given its observations, (n, S)."""
        out = np.empty((self.n_times, self.n_states))
        for k in range(self.n_states):
            yc = self.data.values[k] - self.centers[k]
            km = rbf_kernel_matrices(
                self.times, self.hyper.sigma_f[k], self.hyper.length_scale[k]
            )
            noisy = km.state + self.sigma2[k] * np.eye(self.n_times)
            cho = _cho(noisy, "K + sigma_obs^2 I")
            out[:, k] = self.centers[k] + km.state @ cho_solve(
                cho, yc, check_finite=False
            )
        return out

    def state_terms(self, latent_ts: np.ndarray, derivs_ts: np.ndarray):
        """Per-state (prior, observation, matching) log terms.

        ``latent_ts`` and ``derivs_ts`` are laid out (n_times, n_states).
        """
        g = np.empty((3, self.n_states))
        for k in range(self.n_states):
            z = latent_ts[:, k] - self.centers[k]
            resid_obs = self.data.values[k] - latent_ts[:, k]
            m = self.proj[k] @ z
            r = derivs_ts[:, k] - m
            g[0, k] = -0.5 * z.dot(self.k_inv[k] @ z) + self.const_prior[k]
            g[1, k] = (
                -0.5 * resid_obs.dot(resid_obs) / self.sigma2[k] + self.const_obs[k]
            )
            g[2, k] = -0.5 * r.dot(self.match_inv[k] @ r) + self.const_match[k]
        return g

    def log_density(self, x: np.ndarray, theta) -> float:
        """Joint log density (up to the flat-prior constant) at (x, theta).

        ``x`` is laid out (n_states, n_times) in raw (uncentered) scale.
        """
        theta_vec = np.asarray(
            self.model.theta_array(theta) if hasattr(self.model, "theta_array")
            else theta,
            dtype=float,
        ).ravel()
        if not self.theta_in_bounds(theta_vec):
            return -math.inf
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_states, self.n_times):
            raise StructuralError(
                f"x must have shape ({self.n_states}, {self.n_times})"
            )
        if not np.all(np.isfinite(x)):
            return -math.inf
        latent_ts = np.ascontiguousarray(x.T)
        derivs_ts = np.empty_like(latent_ts)
        self.deriv(latent_ts, theta_vec, derivs_ts)
        return float(self.state_terms(latent_ts, derivs_ts).sum())


def log_density(x, theta, data: TimeSeriesData, hyper: GpHyperParams, model) -> float:
    """Joint log density of latent states and parameters given observations.

    Sums, over states: the GP prior on the latent series, the Gaussian
    observation term, and the derivative-matching term; adds -inf when
    ``theta`` leaves its box.  See :class:`DensityWorkspace` for the
    factorized form used in sampling loops.
    """
    return DensityWorkspace(data, hyper, model).log_density(x, theta)
