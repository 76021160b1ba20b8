"""Experiment configuration: schema, validation, hashing, stage seeds.

One TOML file describes a whole pipeline run.  Sections map onto
stages; a section is only required by the subcommands that read it, so
a config that never optimizes can omit budgets entirely.  Validation
failures raise ConfigError carrying the dotted field path.

The master seed never feeds a generator directly: every stage derives
its own seed by hashing ``"<master>|<stage>"``, so stages can be rerun
independently without collisions and reruns are exactly reproducible.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - version dependent
    import tomli as tomllib

from .allocation import BudgetConfig, GaConfig, ObjectiveSpec
from .errors import ConfigError, EpiallocError
from .models import (
    ModelSpec,
    PopulationConfig,
    default_initial_state,
    model_spec,
)

STAGES = (
    "simulate",
    "synth",
    "fit-gp",
    "fit-nlls",
    "sample",
    "reduce",
    "augment",
    "optimize",
    "evaluate",
    "report",
)

_MODEL_KINDS = ("SEIR", "SEIRM", "SEPIHR", "SEPIHRM")


def stage_seed(master_seed: int, stage: str) -> int:
    """Deterministic 63-bit seed for one pipeline stage."""
    digest = hashlib.sha256(f"{master_seed}|{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def config_digest(raw: dict) -> str:
    """Short content hash of the parsed config, independent of key order."""
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _section(raw: dict, name: str, required: bool) -> dict:
    sec = raw.get(name)
    if sec is None:
        if required:
            raise ConfigError(name, "section is required")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be a table")
    return sec


def _need(sec: dict, path: str, key: str):
    if key not in sec:
        raise ConfigError(f"{path}.{key}", "value is required")
    return sec[key]


def _as_int(value, path: str, minimum=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return value


def _as_number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    return float(value)


def _as_bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(path, f"expected a boolean, got {value!r}")
    return value


def _as_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def _float_list(value, path: str) -> list[float]:
    if not isinstance(value, list) or not value:
        raise ConfigError(path, "expected a nonempty array of numbers")
    return [_as_number(v, f"{path}[{i}]") for i, v in enumerate(value)]


def _float_matrix(value, path: str) -> list[list[float]]:
    if not isinstance(value, list) or not value:
        raise ConfigError(path, "expected a nonempty array of arrays")
    return [_float_list(row, f"{path}[{i}]") for i, row in enumerate(value)]


def _wrap(path: str, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except EpiallocError as exc:
        raise ConfigError(path, str(exc)) from exc


@dataclass
class ExperimentConfig:
    """Parsed, validated pipeline configuration plus its provenance hash."""

    raw: dict
    path: str
    outdir: Path
    master_seed: int
    threads: int
    model: ModelSpec
    population: PopulationConfig
    truth_theta: np.ndarray
    truth_x0: np.ndarray
    truth_horizon: int
    truth_step: float
    obs_times: np.ndarray | None
    obs_sigma: object
    obs_subpop: int
    gp_mismatch: float
    mcmc: dict | None
    nlls: dict
    reduce: dict | None
    onset_grid: list[list[float]] | None
    budgets: BudgetConfig | None
    objective: ObjectiveSpec | None
    ga: dict
    eval_step: float
    config_hash: str = field(init=False)

    def __post_init__(self):
        self.config_hash = config_digest(self.raw)

    # -- stage helpers ----------------------------------------------------

    def seed_for(self, stage: str) -> int:
        return stage_seed(self.master_seed, stage)

    def stage_dir(self, stage: str) -> Path:
        d = self.outdir / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def workers(self, flag_value: int | None = None) -> int:
        """Worker count: flag beats config; EPIALLOC_THREADS caps both."""
        n = flag_value if flag_value is not None else self.threads
        cap = os.environ.get("EPIALLOC_THREADS")
        if cap is not None:
            try:
                cap_n = int(cap)
            except ValueError:
                raise ConfigError("EPIALLOC_THREADS", f"not an integer: {cap!r}")
            if cap_n < 1:
                raise ConfigError("EPIALLOC_THREADS", "must be >= 1")
            n = min(n, cap_n)
        return max(n, 1)

    def allocation_model(self) -> ModelSpec:
        """The immunized variant used for policy work."""
        if self.model.has_immunized:
            return self.model
        fixed = self.raw.get("model", {}).get("fixed_params") or None
        return _wrap("model.kind", lambda: model_spec(self.model.kind + "M", fixed))

    def allocation_x0(self) -> np.ndarray:
        """Truth initial state widened with a zero immunized column."""
        x0 = self.truth_x0
        if self.model.has_immunized:
            return x0.copy()
        return np.hstack([x0, np.zeros((x0.shape[0], 1))])

    def inference_population(self) -> PopulationConfig:
        """Standalone single-subpopulation config for the observed group."""
        return PopulationConfig(
            sizes=[self.population.sizes[self.obs_subpop]],
            names=(self.population.names[self.obs_subpop],),
            eta=self.population.eta,
        )

    def inference_x0(self) -> np.ndarray:
        return self.truth_x0[self.obs_subpop].copy()

    def require_mcmc(self) -> dict:
        if self.mcmc is None:
            raise ConfigError("mcmc", "section required for this stage")
        return self.mcmc

    def require_reduce(self) -> dict:
        if self.reduce is None:
            raise ConfigError("reduce", "section required for this stage")
        return self.reduce

    def require_onset_grid(self) -> list[list[float]]:
        if self.onset_grid is None:
            raise ConfigError("augment.onset_grid", "required for this stage")
        return self.onset_grid

    def require_budgets(self) -> BudgetConfig:
        if self.budgets is None:
            raise ConfigError("budgets", "section required for this stage")
        return self.budgets

    def require_objective(self) -> ObjectiveSpec:
        if self.objective is None:
            raise ConfigError("objective", "section required for this stage")
        return self.objective

    def require_obs_times(self) -> np.ndarray:
        if self.obs_times is None:
            raise ConfigError("observations", "section required for this stage")
        return self.obs_times

    def ga_config(self, seed: int) -> GaConfig:
        return _wrap("ga", lambda: GaConfig(seed=seed, **self.ga))


def load_config(path) -> ExperimentConfig:
    """Parse and validate a pipeline TOML file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"TOML parse error: {exc}") from exc

    run = _section(raw, "run", required=True)
    outdir = Path(_as_str(_need(run, "run", "outdir"), "run.outdir"))
    master_seed = _as_int(_need(run, "run", "master_seed"), "run.master_seed")
    threads = _as_int(run.get("threads", 1), "run.threads", minimum=1)

    msec = _section(raw, "model", required=True)
    kind = _as_str(_need(msec, "model", "kind"), "model.kind")
    if kind not in _MODEL_KINDS:
        raise ConfigError("model.kind", f"must be one of {_MODEL_KINDS}")
    fixed = msec.get("fixed_params")
    if fixed is not None and not isinstance(fixed, dict):
        raise ConfigError("model.fixed_params", "must be a table of numbers")
    if fixed:
        fixed = {
            k: _as_number(v, f"model.fixed_params.{k}") for k, v in fixed.items()
        }
    model = _wrap("model", lambda: model_spec(kind, fixed or None))

    psec = _section(raw, "population", required=True)
    sizes = _float_list(_need(psec, "population", "sizes"), "population.sizes")
    pop_kwargs: dict = {"sizes": sizes}
    if "names" in psec:
        names = psec["names"]
        if not isinstance(names, list) or not all(
            isinstance(n, str) for n in names
        ):
            raise ConfigError("population.names", "expected an array of strings")
        pop_kwargs["names"] = tuple(names)
    if "mobility" in psec:
        pop_kwargs["mobility"] = _float_matrix(
            psec["mobility"], "population.mobility"
        )
    for key in ("onset_c1", "onset_c2"):
        if key in psec:
            pop_kwargs[key] = _float_list(psec[key], f"population.{key}")
    if "eta" in psec:
        pop_kwargs["eta"] = _as_number(psec["eta"], "population.eta")
    population = _wrap("population", lambda: PopulationConfig(**pop_kwargs))

    tsec = _section(raw, "truth", required=True)
    theta_raw = _need(tsec, "truth", "theta")
    if isinstance(theta_raw, dict):
        theta_raw = {
            k: _as_number(v, f"truth.theta.{k}") for k, v in theta_raw.items()
        }
    else:
        theta_raw = _float_list(theta_raw, "truth.theta")
    truth_theta = _wrap("truth.theta", lambda: model.theta_array(theta_raw))
    bounds = model.bounds_array()
    if np.any(truth_theta < bounds[:, 0]) or np.any(truth_theta > bounds[:, 1]):
        raise ConfigError("truth.theta", "outside the model parameter bounds")
    horizon = _as_int(_need(tsec, "truth", "horizon"), "truth.horizon", minimum=1)
    truth_step = _as_number(tsec.get("step", 0.05), "truth.step")
    if truth_step <= 0:
        raise ConfigError("truth.step", "must be positive")
    if "x0" in tsec:
        x0 = np.array(_float_matrix(tsec["x0"], "truth.x0"))
        if x0.shape != (population.n_pops, model.n_states):
            raise ConfigError(
                "truth.x0",
                f"must be {population.n_pops} rows of {model.n_states} states",
            )
    else:
        infected = _as_number(
            tsec.get("initial_infected", 100.0), "truth.initial_infected"
        )
        x0 = _wrap(
            "truth.initial_infected",
            lambda: default_initial_state(model, population, infected),
        )

    osec = _section(raw, "observations", required=False)
    obs_times = None
    obs_sigma: object = None
    obs_subpop = 0
    if osec:
        has_times = "times" in osec
        has_span = "span" in osec
        if has_times == has_span:
            raise ConfigError(
                "observations", "give exactly one of 'times' or 'span'"
            )
        if has_times:
            obs_times = np.array(_float_list(osec["times"], "observations.times"))
        else:
            span = osec["span"]
            if (
                not isinstance(span, list)
                or len(span) != 2
                or not all(isinstance(v, int) for v in span)
                or span[0] > span[1]
            ):
                raise ConfigError(
                    "observations.span", "expected [first_day, last_day] integers"
                )
            obs_times = np.arange(span[0], span[1] + 1, dtype=float)
        if np.any(obs_times <= 0) or obs_times[-1] > horizon:
            raise ConfigError(
                "observations", "times must lie in (0, truth.horizon]"
            )
        sigma_raw = _need(osec, "observations", "sigma")
        if isinstance(sigma_raw, list):
            obs_sigma = np.array(_float_list(sigma_raw, "observations.sigma"))
            if np.any(obs_sigma <= 0):
                raise ConfigError("observations.sigma", "entries must be positive")
        else:
            obs_sigma = _as_number(sigma_raw, "observations.sigma")
            if obs_sigma <= 0:
                raise ConfigError("observations.sigma", "must be positive")
        subpop = osec.get("subpop", 0)
        if isinstance(subpop, str):
            if subpop not in population.names:
                raise ConfigError(
                    "observations.subpop", f"unknown subpopulation {subpop!r}"
                )
            obs_subpop = population.names.index(subpop)
        else:
            obs_subpop = _as_int(subpop, "observations.subpop", minimum=0)
            if obs_subpop >= population.n_pops:
                raise ConfigError("observations.subpop", "index out of range")

    gsec = _section(raw, "gp", required=False)
    gp_mismatch = _as_number(gsec.get("mismatch", 1e-2), "gp.mismatch")
    if gp_mismatch < 0:
        raise ConfigError("gp.mismatch", "must be nonnegative")

    csec = _section(raw, "mcmc", required=False)
    mcmc = None
    if csec:
        mcmc = {
            "iterations": _as_int(
                _need(csec, "mcmc", "iterations"), "mcmc.iterations", minimum=1
            ),
            "burn_in": _as_int(
                _need(csec, "mcmc", "burn_in"), "mcmc.burn_in", minimum=0
            ),
            "thin": _as_int(csec.get("thin", 1), "mcmc.thin", minimum=1),
            "adapt_interval": _as_int(
                csec.get("adapt_interval", 50), "mcmc.adapt_interval", minimum=1
            ),
            "store_latent": _as_bool(
                csec.get("store_latent", False), "mcmc.store_latent"
            ),
        }

    nsec = _section(raw, "nlls", required=False)
    nlls = {
        "n_starts": _as_int(nsec.get("n_starts", 8), "nlls.n_starts", minimum=1),
        "max_iter": _as_int(nsec.get("max_iter", 4000), "nlls.max_iter", minimum=1),
    }

    rsec = _section(raw, "reduce", required=False)
    reduce_cfg = None
    if rsec:
        reduce_cfg = {
            "k": _as_int(_need(rsec, "reduce", "k"), "reduce.k", minimum=1),
            "restarts": _as_int(
                rsec.get("restarts", 10), "reduce.restarts", minimum=1
            ),
            "standardize": _as_bool(
                rsec.get("standardize", False), "reduce.standardize"
            ),
        }

    asec = _section(raw, "augment", required=False)
    onset_grid = None
    if asec:
        grid = _float_matrix(
            _need(asec, "augment", "onset_grid"), "augment.onset_grid"
        )
        if len(grid) != population.n_pops:
            raise ConfigError(
                "augment.onset_grid", "needs one candidate list per subpopulation"
            )
        onset_grid = grid

    bsec = _section(raw, "budgets", required=False)
    budgets = None
    if bsec:
        window = _need(bsec, "budgets", "window")
        if not isinstance(window, list) or len(window) != 2:
            raise ConfigError("budgets.window", "expected [start_day, end_day]")
        per_pop = _need(bsec, "budgets", "per_pop_daily")
        if isinstance(per_pop, list):
            per_pop = _float_list(per_pop, "budgets.per_pop_daily")
            if len(per_pop) != population.n_pops:
                raise ConfigError(
                    "budgets.per_pop_daily", "needs one cap per subpopulation"
                )
        else:
            per_pop = [
                _as_number(per_pop, "budgets.per_pop_daily")
            ] * population.n_pops
        budgets = _wrap(
            "budgets",
            lambda: BudgetConfig(
                window=(window[0], window[1]),
                total_daily=_as_number(
                    _need(bsec, "budgets", "total_daily"), "budgets.total_daily"
                ),
                per_pop_daily=per_pop,
            ),
        )

    jsec = _section(raw, "objective", required=False)
    objective = None
    if jsec:
        objective = _wrap(
            "objective",
            lambda: ObjectiveSpec(
                target_state=_as_str(
                    _need(jsec, "objective", "target_state"),
                    "objective.target_state",
                ),
                horizon=_as_int(
                    _need(jsec, "objective", "horizon"),
                    "objective.horizon",
                    minimum=1,
                ),
            ),
        )
        _wrap(
            "objective.target_state",
            lambda: objective.state_index(
                model if model.has_immunized else model_spec(kind + "M")
            ),
        )

    gasec = _section(raw, "ga", required=False)
    ga = {
        "population_size": _as_int(
            gasec.get("population_size", 100), "ga.population_size", minimum=2
        ),
        "generations": _as_int(
            gasec.get("generations", 200), "ga.generations", minimum=1
        ),
        "crossover_prob": _as_number(
            gasec.get("crossover_prob", 0.9), "ga.crossover_prob"
        ),
        "mutation_prob": _as_number(
            gasec.get("mutation_prob", 0.5), "ga.mutation_prob"
        ),
        "eta_crossover": _as_number(
            gasec.get("eta_crossover", 10.0), "ga.eta_crossover"
        ),
        "eta_mutation": _as_number(
            gasec.get("eta_mutation", 10.0), "ga.eta_mutation"
        ),
    }

    esec = _section(raw, "evaluate", required=False)
    eval_step = _as_number(esec.get("step", 0.05), "evaluate.step")
    if eval_step <= 0:
        raise ConfigError("evaluate.step", "must be positive")

    return ExperimentConfig(
        raw=raw,
        path=str(path),
        outdir=outdir,
        master_seed=master_seed,
        threads=threads,
        model=model,
        population=population,
        truth_theta=truth_theta,
        truth_x0=x0,
        truth_horizon=horizon,
        truth_step=truth_step,
        obs_times=obs_times,
        obs_sigma=obs_sigma,
        obs_subpop=obs_subpop,
        gp_mismatch=gp_mismatch,
        mcmc=mcmc,
        nlls=nlls,
        reduce=reduce_cfg,
        onset_grid=onset_grid,
        budgets=budgets,
        objective=objective,
        ga=ga,
        eval_step=eval_step,
    )
