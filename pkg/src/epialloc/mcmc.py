"""Componentwise random-walk Metropolis sampling of the joint density.

The sampler sweeps, per iteration, over every model parameter and every
latent state entry, accepting each move against the joint density built
from the GP prior, the observation term, and the derivative-matching
term.  Latent moves are scored by incremental quadratic-form updates
(O(n) per move) against cached solves; the caches are rebuilt exactly at
a fixed interval so float drift cannot accumulate over long chains.

Proposal step sizes adapt toward a target acceptance rate during
burn-in only and are frozen afterwards, so the recorded samples come
from a fixed transition kernel.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, StructuralError
from .gp import DensityWorkspace, GpHyperParams
from .models import TimeSeriesData

REFRESH_INTERVAL = 1000
ADAPT_TARGET = 0.25
ADAPT_GAIN = 0.6
THETA_STEP_FRACTION = 0.05


def metropolis_accept(log_ratio: float, log_u: float) -> bool:
    """Accept rule for a symmetric proposal: ``log u < log ratio``."""
    return log_u < log_ratio


@dataclass(frozen=True)
class ChainConfig:
    """Run-length, seeding, and proposal settings for one chain."""

    iterations: int
    burn_in: int
    seed: int
    thin: int = 1
    adapt_interval: int = 50
    theta_step: float | None = None
    latent_step: float | None = None
    store_latent: bool = False
    initial_theta: object = None

    def __post_init__(self):
        if self.iterations < 0 or self.burn_in < 0:
            raise DomainError("iterations and burn_in must be nonnegative")
        if self.burn_in > self.iterations:
            raise DomainError("burn_in cannot exceed iterations")
        if self.thin < 1:
            raise DomainError("thin must be at least 1")
        if self.adapt_interval < 1:
            raise DomainError("adapt_interval must be at least 1")


@dataclass(frozen=True)
class PosteriorChain:
    """Thinned post-burn-in parameter draws plus run metadata."""

    param_names: tuple[str, ...]
    samples: np.ndarray
    acceptance: dict[str, float]
    seed: int
    iterations: int
    burn_in: int
    thin: int
    model_kind: str
    bounds: np.ndarray
    state_names: tuple[str, ...]
    latent_mean: np.ndarray | None = None
    latent_samples: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def theta_mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def theta_std(self) -> np.ndarray:
        return self.samples.std(axis=0, ddof=1)

    def quantile(self, q) -> np.ndarray:
        return np.quantile(self.samples, q, axis=0)

    def summarize(self) -> dict:
        """Per-parameter mean/std and central quantiles."""
        q05, q50, q95 = self.quantile([0.05, 0.5, 0.95])
        mean, std = self.theta_mean(), self.theta_std()
        return {
            name: {
                "mean": float(mean[i]),
                "std": float(std[i]),
                "q05": float(q05[i]),
                "q50": float(q50[i]),
                "q95": float(q95[i]),
            }
            for i, name in enumerate(self.param_names)
        }

    def to_dict(self) -> dict:
        out = {
            "param_names": list(self.param_names),
            "samples": self.samples.tolist(),
            "acceptance": {k: float(v) for k, v in self.acceptance.items()},
            "seed": int(self.seed),
            "iterations": int(self.iterations),
            "burn_in": int(self.burn_in),
            "thin": int(self.thin),
            "model_kind": self.model_kind,
            "bounds": self.bounds.tolist(),
            "state_names": list(self.state_names),
        }
        if self.latent_mean is not None:
            out["latent_mean"] = self.latent_mean.tolist()
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "PosteriorChain":
        names = tuple(payload["param_names"])
        samples = np.asarray(payload["samples"], dtype=float)
        samples = samples.reshape(-1, len(names)) if samples.size else samples.reshape(
            0, len(names)
        )
        latent_mean = payload.get("latent_mean")
        return cls(
            param_names=names,
            samples=samples,
            acceptance=dict(payload["acceptance"]),
            seed=int(payload["seed"]),
            iterations=int(payload["iterations"]),
            burn_in=int(payload["burn_in"]),
            thin=int(payload.get("thin", 1)),
            model_kind=payload["model_kind"],
            bounds=np.asarray(payload["bounds"], dtype=float),
            state_names=tuple(payload["state_names"]),
            latent_mean=None if latent_mean is None else np.asarray(latent_mean),
        )


class _SamplerState:
    """Mutable caches for one chain: latent, derivatives, solves, terms."""

    def __init__(self, ws: DensityWorkspace, theta: np.ndarray, latent: np.ndarray):
        self.ws = ws
        self.theta = theta
        self.latent = latent
        n, s = ws.n_times, ws.n_states
        self.z = np.empty((n, s))
        self.f = np.empty((n, s))
        self.m = np.empty((n, s))
        self.r = np.empty((n, s))
        self.kz = np.empty((n, s))
        self.mr = np.empty((n, s))
        self.g = np.empty((3, s))
        self.k_inv_diag = np.stack([np.diag(a) for a in ws.k_inv], axis=1)
        self.match_diag = np.stack([np.diag(a) for a in ws.match_inv], axis=1)
        # scratch buffers reused across moves
        self._row = np.empty((1, s))
        self._drow = np.empty((1, s))
        self._theta_prop = np.empty_like(theta)
        self._f_buf = np.empty((n, s))
        self._r_buf = np.empty((n, s))
        self._mr_buf = np.empty((n, s))
        self.refresh()

    def refresh(self):
        """Rebuild every cache exactly from the current (latent, theta)."""
        ws = self.ws
        np.subtract(self.latent, ws.centers[None, :], out=self.z)
        ws.deriv(self.latent, self.theta, self.f)
        for k in range(ws.n_states):
            self.m[:, k] = ws.proj[k] @ self.z[:, k]
            self.kz[:, k] = ws.k_inv[k] @ self.z[:, k]
        np.subtract(self.f, self.m, out=self.r)
        for k in range(ws.n_states):
            self.mr[:, k] = ws.match_inv[k] @ self.r[:, k]
        resid = ws.data.values - self.latent.T
        self.g[0] = -0.5 * np.einsum("ns,ns->s", self.z, self.kz) + ws.const_prior
        self.g[1] = -0.5 * (resid * resid).sum(axis=1) / ws.sigma2 + ws.const_obs
        self.g[2] = -0.5 * np.einsum("ns,ns->s", self.r, self.mr) + ws.const_match

    def log_density(self) -> float:
        return float(self.g.sum())

    def try_theta_move(self, comp: int, value: float, log_u: float) -> bool:
        """Propose one parameter component; other terms are unchanged."""
        ws = self.ws
        lo, hi = ws.bounds[comp]
        if not (lo <= value <= hi):
            return False
        self._theta_prop[:] = self.theta
        self._theta_prop[comp] = value
        ws.deriv(self.latent, self._theta_prop, self._f_buf)
        np.subtract(self._f_buf, self.m, out=self._r_buf)
        for k in range(ws.n_states):
            self._mr_buf[:, k] = ws.match_inv[k] @ self._r_buf[:, k]
        g3_new = (
            -0.5 * np.einsum("ns,ns->s", self._r_buf, self._mr_buf) + ws.const_match
        )
        if not metropolis_accept(float(g3_new.sum() - self.g[2].sum()), log_u):
            return False
        self.theta[comp] = value
        self.f, self._f_buf = self._f_buf, self.f
        self.r, self._r_buf = self._r_buf, self.r
        self.mr, self._mr_buf = self._mr_buf, self.mr
        self.g[2] = g3_new
        return True

    def try_latent_move(self, j: int, k: int, delta: float, log_u: float) -> bool:
        """Propose one latent entry; score by incremental quadratic updates."""
        ws = self.ws
        row, drow = self._row, self._drow
        row[0, :] = self.latent[j]
        row[0, k] += delta
        ws.deriv(row, self.theta, drow)
        df = drow[0] - self.f[j]
        # GP prior and observation terms touch state k only
        d1 = -delta * self.kz[j, k] - 0.5 * delta * delta * self.k_inv_diag[j, k]
        resid = ws.data.values[k, j] - self.latent[j, k]
        d2 = (delta * resid - 0.5 * delta * delta) / ws.sigma2[k]
        # matching term: single-entry residual change for states != k ...
        d3 = -(df * self.mr[j, :] + 0.5 * df * df * self.match_diag[j, :])
        # ... and a dense residual change for state k (its GP-implied mean
        # shifts at every time point when one of its latent values moves)
        v = -delta * ws.proj[k][:, j]
        v[j] += df[k]
        mv = ws.match_inv[k] @ v
        d3[k] = -(v @ self.mr[:, k] + 0.5 * (v @ mv))
        if not metropolis_accept(d1 + d2 + float(d3.sum()), log_u):
            return False
        self.latent[j, k] += delta
        self.z[j, k] += delta
        self.kz[:, k] += delta * ws.k_inv[k][:, j]
        self.f[j] = drow[0]
        self.m[:, k] += delta * ws.proj[k][:, j]
        df_k = df[k]
        df[k] = 0.0
        self.r[j, :] += df
        self.r[:, k] += v
        for s2 in range(ws.n_states):
            if s2 != k and df[s2] != 0.0:
                self.mr[:, s2] += df[s2] * ws.match_inv[s2][:, j]
        self.mr[:, k] += mv
        df[k] = df_k
        self.g[0, k] += d1
        self.g[1, k] += d2
        self.g[2] += d3
        return True


def _initial_theta(ws: DensityWorkspace, model, config: ChainConfig) -> np.ndarray:
    if config.initial_theta is None:
        return 0.5 * (ws.bounds[:, 0] + ws.bounds[:, 1])
    if hasattr(model, "theta_array"):
        theta = np.array(model.theta_array(config.initial_theta), dtype=float)
    else:
        theta = np.asarray(config.initial_theta, dtype=float).ravel()
    if theta.shape != (ws.bounds.shape[0],):
        raise StructuralError("initial_theta has the wrong number of entries")
    if not ws.theta_in_bounds(theta):
        raise DomainError("initial_theta lies outside the parameter bounds")
    return theta


def mh_sample(
    data: TimeSeriesData, model, hyper: GpHyperParams, config: ChainConfig
) -> PosteriorChain:
    """Sample (theta, latent states) from the joint matching density.

    ``model`` needs ``param_names``, ``state_names``, ``bounds_array()``
    and a derivative rule usable by the density workspace; each
    derivative output row may depend only on the matching input row
    (true for the single-population autonomous families), which is what
    makes single-entry latent updates exact.

    Returns the thinned post-burn-in parameter draws, per-block
    acceptance rates measured after burn-in, and the post-burn-in mean
    of the latent states.
    """
    ws = DensityWorkspace(data, hyper, model)
    rng = np.random.default_rng(config.seed)
    n, s = ws.n_times, ws.n_states
    p = ws.bounds.shape[0]
    param_names = tuple(model.param_names)

    theta = _initial_theta(ws, model, config)
    state = _SamplerState(ws, theta, ws.initial_latent())

    span = ws.bounds[:, 1] - ws.bounds[:, 0]
    theta_frac = THETA_STEP_FRACTION if config.theta_step is None else config.theta_step
    theta_scale = theta_frac * span
    data_spread = np.maximum(np.std(ws.data.values, axis=1), 1e-9)
    latent_mult = 1.0 if config.latent_step is None else config.latent_step
    latent_scale = latent_mult * np.maximum(ws.hyper.sigma_obs, 0.05 * data_spread)
    scale_floor = np.concatenate([theta_scale, latent_scale]) * 1e-8
    scale_ceil = np.concatenate([theta_scale, latent_scale]) * 1e8

    n_blocks = p + s
    win_att = np.zeros(n_blocks)
    win_acc = np.zeros(n_blocks)
    post_att = np.zeros(n_blocks)
    post_acc = np.zeros(n_blocks)

    n_entries = p + n * s
    kept: list[np.ndarray] = []
    kept_latent: list[np.ndarray] = []
    latent_sum = np.zeros((n, s))
    latent_count = 0

    for sweep in range(config.iterations):
        noise = rng.standard_normal(n_entries)
        log_u = np.log1p(-rng.random(n_entries))
        post = sweep >= config.burn_in
        idx = 0
        for comp in range(p):
            ok = state.try_theta_move(
                comp, state.theta[comp] + theta_scale[comp] * noise[idx], log_u[idx]
            )
            win_att[comp] += 1
            win_acc[comp] += ok
            if post:
                post_att[comp] += 1
                post_acc[comp] += ok
            idx += 1
        for k in range(s):
            block = p + k
            scale_k = latent_scale[k]
            for j in range(n):
                ok = state.try_latent_move(j, k, scale_k * noise[idx], log_u[idx])
                win_acc[block] += ok
                if post:
                    post_acc[block] += ok
                idx += 1
            win_att[block] += n
            if post:
                post_att[block] += n

        if not post and (sweep + 1) % config.adapt_interval == 0:
            rates = win_acc / np.maximum(win_att, 1.0)
            factors = np.exp(ADAPT_GAIN * (rates - ADAPT_TARGET))
            theta_scale = np.clip(
                theta_scale * factors[:p], scale_floor[:p], scale_ceil[:p]
            )
            latent_scale = np.clip(
                latent_scale * factors[p:], scale_floor[p:], scale_ceil[p:]
            )
            win_att[:] = 0.0
            win_acc[:] = 0.0
        if (sweep + 1) % REFRESH_INTERVAL == 0:
            state.refresh()
        if post:
            latent_sum += state.latent
            latent_count += 1
            if (sweep - config.burn_in) % config.thin == 0:
                kept.append(state.theta.copy())
                if config.store_latent:
                    kept_latent.append(state.latent.copy())

    samples = np.array(kept) if kept else np.zeros((0, p))
    block_names = [f"theta:{name}" for name in param_names] + [
        f"latent:{name}" for name in ws.data.state_names
    ]
    rates = post_acc / np.maximum(post_att, 1.0)
    acceptance = {name: float(rates[i]) for i, name in enumerate(block_names)}
    return PosteriorChain(
        param_names=param_names,
        samples=samples,
        acceptance=acceptance,
        seed=config.seed,
        iterations=config.iterations,
        burn_in=config.burn_in,
        thin=config.thin,
        model_kind=getattr(model, "kind", "custom"),
        bounds=ws.bounds.copy(),
        state_names=tuple(ws.data.state_names),
        latent_mean=latent_sum / latent_count if latent_count else None,
        latent_samples=np.array(kept_latent) if kept_latent else None,
    )
