"""Vaccine-allocation policy evaluation and a constrained genetic solver.

Policies are daily dose-rate matrices over an allocation window; a
policy is scored by the probability-weighted peak of a target
compartment across a scenario set.  Every (policy, scenario) pair is an
independent simulation, so candidate batches are integrated jointly as
one stacked system and, optionally, split across worker processes.  All
arithmetic inside the right-hand sides is elementwise and chunking is
fixed, so objectives are bit-identical for any worker count.

The solver is an elitist genetic algorithm with binary-tournament
selection under feasibility-first domination, bounded simulated-binary
crossover, and bounded polynomial mutation; per-gene caps bake the
per-subpopulation limits into the genome so only the shared daily
budget can be violated.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainError,
    EvaluationError,
    FeasibilityError,
    StructuralError,
)
from .models import (
    DEFAULT_STEP,
    ModelSpec,
    PopulationConfig,
    VaccinePolicy,
    integrate_batch,
    make_batch_context,
)
from .scenarios import ScenarioSet

EVAL_CHUNK_ROWS = 4096


@dataclass(frozen=True)
class BudgetConfig:
    """Shared daily dose budget and per-subpopulation daily caps."""

    window: tuple[int, int]
    total_daily: float
    per_pop_daily: np.ndarray

    def __post_init__(self):
        start, end = self.window
        if int(start) != start or int(end) != end:
            raise DomainError("window days must be integers")
        if start < 0 or end < start:
            raise DomainError("window must satisfy 0 <= start <= end")
        object.__setattr__(self, "window", (int(start), int(end)))
        if not self.total_daily >= 0:
            raise DomainError("total_daily must be nonnegative")
        caps = np.asarray(self.per_pop_daily, dtype=float).ravel()
        if caps.size == 0 or np.any(caps < 0) or not np.all(np.isfinite(caps)):
            raise DomainError("per_pop_daily entries must be nonnegative and finite")
        object.__setattr__(self, "per_pop_daily", caps)

    @property
    def n_days(self) -> int:
        return self.window[1] - self.window[0] + 1


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which compartment's population-total peak to minimize, and over
    how many days."""

    target_state: str
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise DomainError("horizon must be at least one day")
        if not self.target_state:
            raise DomainError("target_state must be named")

    def state_index(self, model: ModelSpec) -> int:
        if self.target_state not in model.state_names:
            raise DomainError(
                f"target state {self.target_state!r} not in model {model.kind}"
            )
        return model.state_names.index(self.target_state)


@dataclass(frozen=True)
class GaConfig:
    """Population size, operator rates, and seeding for the solver."""

    population_size: int = 100
    generations: int = 200
    crossover_prob: float = 0.9
    mutation_prob: float = 0.5
    eta_crossover: float = 10.0
    eta_mutation: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.population_size <= 0 or self.population_size % 2:
            raise DomainError("population_size must be positive and even")
        if self.generations < 1:
            raise DomainError("generations must be at least 1")
        for name in ("crossover_prob", "mutation_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1]")
        if self.eta_crossover <= 0 or self.eta_mutation <= 0:
            raise DomainError("distribution indices must be positive")


@dataclass(frozen=True)
class EvaluationResult:
    """Expected peak, the per-scenario peaks behind it, and feasibility."""

    objective: float
    peaks: np.ndarray
    probabilities: np.ndarray
    violation: float


def constraint_violation(policy: VaccinePolicy, budgets: BudgetConfig) -> float:
    """Total dose mass by which a policy breaks the budget constraints.

    Sums the daily overshoot of the shared budget, the overshoot of
    each subpopulation cap, and any negative allocation; zero exactly
    when the policy is feasible.
    """
    if policy.window != budgets.window:
        raise StructuralError("policy and budget windows differ")
    v = policy.doses
    over_total = np.maximum(v.sum(axis=0) - budgets.total_daily, 0.0).sum()
    over_cap = np.maximum(v - budgets.per_pop_daily[:, None], 0.0).sum()
    negative = np.maximum(-v, 0.0).sum()
    return float(over_total + over_cap + negative)


def genome_violations(genomes: np.ndarray, budgets: BudgetConfig, n_pops: int):
    """Vectorized budget violations for a (P, K*W) genome batch."""
    w = budgets.n_days
    v = genomes.reshape(genomes.shape[0], n_pops, w)
    over_total = np.maximum(v.sum(axis=1) - budgets.total_daily, 0.0).sum(axis=1)
    over_cap = np.maximum(v - budgets.per_pop_daily[None, :, None], 0.0).sum(
        axis=(1, 2)
    )
    negative = np.maximum(-v, 0.0).sum(axis=(1, 2))
    return over_total + over_cap + negative


def dominates_key(violation: float, objective: float) -> tuple:
    """Sort key of feasibility-first domination: any feasible policy
    outranks any infeasible one, then lower violation, then lower
    objective."""
    return (violation > 0.0, violation, objective)


# ---------------------------------------------------------------------------
# Batched scenario evaluation.
# ---------------------------------------------------------------------------

_WORKER_STATE: dict = {}


def _peaks_for_rows(state: dict, start: int, stop: int, genomes: np.ndarray):
    """Peak target totals for joint rows [start, stop) of the
    (policy, scenario) cross product; ``genomes`` holds exactly the
    policies those rows reference, starting at row ``start``'s policy."""
    n_scen = state["n_scen"]
    rows = np.arange(start, stop)
    pol = rows // n_scen
    scen = rows - pol * n_scen
    thetas = state["thetas"][scen]
    c2 = state["c2"][scen] if state["c2"] is not None else None
    n_pops, w = state["n_pops"], state["window_days"]
    tables = np.zeros((rows.size, n_pops, state["n_days"]))
    tables[:, :, state["win_start"] : state["win_start"] + w] = genomes[
        pol - pol[0]
    ].reshape(-1, n_pops, w)
    pars, ctx = make_batch_context(state["model"], state["pop"], thetas, c2)
    x0 = np.broadcast_to(
        state["x0"], (rows.size, n_pops, state["model"].n_states)
    ).copy()
    peaks = np.full(rows.size, -np.inf)
    target = state["target_idx"]

    def take(_i, x):
        total = x[:, 0, target]
        for k in range(1, n_pops):
            total = total + x[:, k, target]
        np.maximum(peaks, total, out=peaks)

    failed, _ = integrate_batch(
        state["model"], ctx, pars, x0, state["grid"], state["step"], tables, take
    )
    return peaks, failed, scen


def _init_worker(state: dict):
    _WORKER_STATE.update(state)


def _worker_job(args):
    start, stop, genomes = args
    return _peaks_for_rows(_WORKER_STATE, start, stop, genomes)


class ScenarioBatchEvaluator:
    """Simulates policies against a fixed scenario set and reduces each
    to its expected target-compartment peak.

    The scenario axis (parameters and onset midpoints), initial state,
    horizon, and step are frozen at construction; policies arrive as
    dose matrices or flat genome batches.  With ``workers > 1`` the
    fixed-size row chunks are farmed to worker processes; chunk
    boundaries and the final fixed-order probability accumulation do
    not depend on the worker count.
    """

    def __init__(
        self,
        model: ModelSpec,
        pop: PopulationConfig,
        scenarios: ScenarioSet,
        objective: ObjectiveSpec,
        budgets: BudgetConfig,
        x0: np.ndarray,
        step: float = DEFAULT_STEP,
        workers: int = 1,
        chunk_rows: int = EVAL_CHUNK_ROWS,
    ):
        if not model.has_immunized:
            raise DomainError(
                "policy evaluation needs an immunized model variant (…M)"
            )
        if tuple(scenarios.param_names) != tuple(model.param_names):
            raise StructuralError(
                "scenario parameter names must match the model, in order"
            )
        if scenarios.c2 is not None and scenarios.c2.shape[1] != pop.n_pops:
            raise StructuralError("scenario onset width must match subpopulations")
        if budgets.window[1] >= objective.horizon:
            raise DomainError("allocation window must end inside the horizon")
        if workers < 1:
            raise DomainError("workers must be at least 1")
        if chunk_rows < 1:
            raise DomainError("chunk_rows must be at least 1")
        caps = np.broadcast_to(budgets.per_pop_daily, (pop.n_pops,))
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (pop.n_pops, model.n_states):
            raise StructuralError(
                f"x0 must have shape ({pop.n_pops}, {model.n_states})"
            )
        self.model = model
        self.pop = pop
        self.scenarios = scenarios
        self.objective = objective
        self.budgets = budgets
        self.workers = workers
        self.chunk_rows = chunk_rows
        self.gene_caps = np.repeat(caps, budgets.n_days)
        self._pool = None
        self._state = {
            "model": model,
            "pop": pop,
            "thetas": scenarios.thetas,
            "c2": scenarios.c2,
            "x0": x0,
            "grid": np.arange(0.0, float(objective.horizon) + 0.5),
            "step": float(step),
            "target_idx": objective.state_index(model),
            "n_scen": scenarios.n,
            "n_pops": pop.n_pops,
            "n_days": int(objective.horizon),
            "win_start": budgets.window[0],
            "window_days": budgets.n_days,
        }
        # fail fast if onset midpoints are supplied without a configured slope
        make_batch_context(model, pop, scenarios.thetas, scenarios.c2)

    @property
    def n_pops(self) -> int:
        return self.pop.n_pops

    @property
    def n_scenarios(self) -> int:
        return self.scenarios.n

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _jobs(self, genomes: np.ndarray):
        n_scen = self.scenarios.n
        total = genomes.shape[0] * n_scen
        for start in range(0, total, self.chunk_rows):
            stop = min(start + self.chunk_rows, total)
            p0 = start // n_scen
            p1 = (stop - 1) // n_scen + 1
            yield start, stop, genomes[p0:p1]

    def peak_matrix(self, genomes) -> np.ndarray:
        """Per-scenario peaks for a (P, K*W) genome batch, shape (P, n_scen)."""
        genomes = np.asarray(genomes, dtype=float)
        if genomes.ndim != 2 or genomes.shape[1] != self.gene_caps.size:
            raise StructuralError(
                f"genomes must have shape (P, {self.gene_caps.size})"
            )
        n_scen = self.scenarios.n
        total = genomes.shape[0] * n_scen
        peaks = np.empty(total)
        bad: list[int] = []
        if self.workers == 1:
            results = (
                _peaks_for_rows(self._state, a, b, g) for a, b, g in self._jobs(genomes)
            )
        else:
            if self._pool is None:
                self._pool = ProcessPoolExecutor(
                    max_workers=self.workers,
                    initializer=_init_worker,
                    initargs=(self._state,),
                )
            results = self._pool.map(_worker_job, self._jobs(genomes))
        cursor = 0
        for chunk_peaks, failed, scen in results:
            peaks[cursor : cursor + chunk_peaks.size] = chunk_peaks
            if failed.any():
                bad.extend(int(s) for s in scen[failed])
            cursor += chunk_peaks.size
        if bad:
            ids = sorted(set(bad))
            raise EvaluationError(
                f"integration diverged in scenarios {ids}", scenario_ids=ids
            )
        return peaks.reshape(genomes.shape[0], n_scen)

    def expected_peaks(self, peak_rows: np.ndarray) -> np.ndarray:
        """Probability-weighted peaks, accumulated in fixed scenario order."""
        probs = self.scenarios.probabilities
        out = np.empty(peak_rows.shape[0])
        for i in range(peak_rows.shape[0]):
            row = peak_rows[i]
            acc = probs[0] * row[0]
            for w in range(1, probs.size):
                acc += probs[w] * row[w]
            out[i] = acc
        return out

    def evaluate_genomes(self, genomes) -> tuple[np.ndarray, np.ndarray]:
        """(expected objective, per-scenario peaks) for a genome batch."""
        peaks = self.peak_matrix(genomes)
        return self.expected_peaks(peaks), peaks

    def evaluate(self, policy: VaccinePolicy) -> EvaluationResult:
        """Expected peak and constraint violation of one policy."""
        if policy.window != self.budgets.window:
            raise StructuralError("policy and budget windows differ")
        if policy.n_pops != self.pop.n_pops:
            raise StructuralError("policy subpopulation count differs")
        objective, peaks = self.evaluate_genomes(policy.doses.ravel()[None, :])
        return EvaluationResult(
            objective=float(objective[0]),
            peaks=peaks[0],
            probabilities=self.scenarios.probabilities.copy(),
            violation=constraint_violation(policy, self.budgets),
        )

    def mean_trajectory(self, policy: VaccinePolicy):
        """Probability-weighted state trajectory under one policy.

        Returns ``(grid, states)`` with states of shape (T, K, n_states),
        averaged over scenarios in fixed order; used for reporting.
        """
        if policy.window != self.budgets.window:
            raise StructuralError("policy and budget windows differ")
        st = self._state
        n_scen = self.scenarios.n
        tables = np.zeros((n_scen, st["n_pops"], st["n_days"]))
        tables[:, :, st["win_start"] : st["win_start"] + st["window_days"]] = (
            policy.doses
        )
        pars, ctx = make_batch_context(
            self.model, self.pop, st["thetas"], st["c2"]
        )
        x0 = np.broadcast_to(
            st["x0"], (n_scen, st["n_pops"], self.model.n_states)
        ).copy()
        grid = st["grid"]
        probs = self.scenarios.probabilities
        mean = np.zeros((grid.size, st["n_pops"], self.model.n_states))

        def take(i, x):
            acc = probs[0] * x[0]
            for w in range(1, n_scen):
                acc = acc + probs[w] * x[w]
            mean[i] = acc

        failed, _ = integrate_batch(
            self.model, ctx, pars, x0, grid, st["step"], tables, take
        )
        if failed.any():
            ids = sorted(int(i) for i in np.nonzero(failed)[0])
            raise EvaluationError(
                f"integration diverged in scenarios {ids}", scenario_ids=ids
            )
        return grid.copy(), mean


def evaluate_policy(
    policy: VaccinePolicy,
    scenarios: ScenarioSet,
    model: ModelSpec,
    pop: PopulationConfig,
    objective: ObjectiveSpec,
    budgets: BudgetConfig,
    x0,
    step: float = DEFAULT_STEP,
    workers: int = 1,
) -> EvaluationResult:
    """One-shot policy evaluation; see ScenarioBatchEvaluator."""
    with ScenarioBatchEvaluator(
        model, pop, scenarios, objective, budgets, x0, step=step, workers=workers
    ) as ev:
        return ev.evaluate(policy)


# ---------------------------------------------------------------------------
# Genetic solver.
# ---------------------------------------------------------------------------


def _tournament_winners(flags, viols, objs, left, right):
    """Vectorized feasibility-first comparison; ties keep the left pick."""
    lf, rf = flags[left], flags[right]
    lv, rv = viols[left], viols[right]
    lo, ro = objs[left], objs[right]
    left_wins = (lf < rf) | (
        (lf == rf) & ((lv < rv) | ((lv == rv) & (lo <= ro)))
    )
    return np.where(left_wins, left, right)


def _sbx_pairs(parents, caps, eta, p_c, rng):
    """Bounded simulated-binary crossover over consecutive parent pairs."""
    half = parents.shape[0] // 2
    d = parents.shape[1]
    x1 = parents[0::2].copy()
    x2 = parents[1::2].copy()
    do_pair = rng.random(half) < p_c
    do_gene = rng.random((half, d)) < 0.5
    u = rng.random((half, d))
    swap = rng.random((half, d)) < 0.5
    lo_b, hi_b = 0.0, caps[None, :]

    y1 = np.minimum(x1, x2)
    y2 = np.maximum(x1, x2)
    spread = y2 - y1
    active = do_pair[:, None] & do_gene & (spread > 1e-14)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta1 = 1.0 + 2.0 * (y1 - lo_b) / spread
        beta2 = 1.0 + 2.0 * (hi_b - y2) / spread
        exp = eta + 1.0

        def betaq(beta):
            alpha = 2.0 - beta ** (-exp)
            lowside = (u * alpha) ** (1.0 / exp)
            highside = (1.0 / (2.0 - u * alpha)) ** (1.0 / exp)
            return np.where(u <= 1.0 / alpha, lowside, highside)

        c1 = 0.5 * ((y1 + y2) - betaq(beta1) * spread)
        c2 = 0.5 * ((y1 + y2) + betaq(beta2) * spread)
    c1 = np.clip(c1, 0.0, hi_b)
    c2 = np.clip(c2, 0.0, hi_b)
    low = np.where(swap, c2, c1)
    high = np.where(swap, c1, c2)
    child1 = np.where(active, low, x1)
    child2 = np.where(active, high, x2)
    out = np.empty_like(parents)
    out[0::2] = child1
    out[1::2] = child2
    return out


def _polynomial_mutation(children, caps, eta, p_m, rng):
    """Bounded polynomial mutation applied gene-wise in place."""
    shape = children.shape
    do = rng.random(shape) < p_m
    u = rng.random(shape)
    span = caps[None, :]
    x = children
    with np.errstate(divide="ignore", invalid="ignore"):
        delta1 = x / span
        delta2 = (span - x) / span
        exp = eta + 1.0
        pow_ = 1.0 / exp
        val_low = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - delta1) ** exp
        val_high = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - delta2) ** exp
        deltaq = np.where(u < 0.5, val_low**pow_ - 1.0, 1.0 - val_high**pow_)
    mutated = np.clip(x + deltaq * span, 0.0, span)
    # degenerate genes (zero cap) stay pinned at zero
    mutated = np.where(span > 0, mutated, 0.0)
    return np.where(do, mutated, x)


def ga_optimize(
    evaluator: ScenarioBatchEvaluator,
    budgets: BudgetConfig,
    ga: GaConfig,
) -> tuple[VaccinePolicy, list[dict]]:
    """Minimize the expected peak over feasible dose policies.

    Returns the best feasible policy ever evaluated and a per-generation
    convergence trace.  Candidates with any budget violation are never
    simulated; they compete on violation alone.  Raises a feasibility
    error carrying the smallest violation seen if no feasible candidate
    appears in any generation.
    """
    ev_b = evaluator.budgets
    if (
        budgets.window != ev_b.window
        or budgets.total_daily != ev_b.total_daily
        or not np.array_equal(budgets.per_pop_daily, ev_b.per_pop_daily)
    ):
        raise StructuralError("evaluator was built for different budgets")
    caps = evaluator.gene_caps
    d = caps.size
    b = ga.population_size
    rng = np.random.default_rng(ga.seed)

    genomes = rng.uniform(0.0, 1.0, (b, d)) * caps[None, :]
    genomes[0] = 0.0  # the all-zero policy is always a feasible anchor

    def score(batch):
        viol = genome_violations(batch, budgets, evaluator.n_pops)
        obj = np.full(batch.shape[0], np.inf)
        feas = viol == 0.0
        if feas.any():
            obj[feas], _ = evaluator.evaluate_genomes(batch[feas])
        return viol, obj

    viol, obj = score(genomes)
    best_violation = float(viol.min())
    best_obj, best_genome = np.inf, None
    trace: list[dict] = []

    def update_best():
        nonlocal best_obj, best_genome, best_violation
        best_violation = min(best_violation, float(viol.min()))
        feas = viol == 0.0
        if feas.any():
            i = int(np.argmin(np.where(feas, obj, np.inf)))
            if obj[i] < best_obj:
                best_obj = float(obj[i])
                best_genome = genomes[i].copy()

    def log(gen):
        feas = viol == 0.0
        trace.append(
            {
                "generation": gen,
                "best_feasible_objective": best_obj,
                "best_violation": float(viol.min()),
                "mean_objective": float(obj[feas].mean()) if feas.any() else math.inf,
            }
        )

    update_best()
    log(0)
    flags = (viol > 0.0).astype(np.int8)
    for gen in range(1, ga.generations + 1):
        picks = rng.integers(0, b, size=(2, b))
        parents_idx = _tournament_winners(flags, viol, obj, picks[0], picks[1])
        children = _sbx_pairs(
            genomes[parents_idx], caps, ga.eta_crossover, ga.crossover_prob, rng
        )
        children = _polynomial_mutation(
            children, caps, ga.eta_mutation, ga.mutation_prob, rng
        )
        c_viol, c_obj = score(children)
        all_genomes = np.vstack([genomes, children])
        all_viol = np.concatenate([viol, c_viol])
        all_obj = np.concatenate([obj, c_obj])
        all_flags = (all_viol > 0.0).astype(np.int8)
        order = np.lexsort(
            (np.arange(all_viol.size), all_obj, all_viol, all_flags)
        )[:b]
        genomes = all_genomes[order]
        viol = all_viol[order]
        obj = all_obj[order]
        flags = all_flags[order]
        update_best()
        log(gen)

    if best_genome is None:
        raise FeasibilityError(
            "no feasible policy found", best_violation=best_violation
        )
    policy = VaccinePolicy(
        window=budgets.window,
        doses=best_genome.reshape(evaluator.n_pops, budgets.n_days),
    )
    return policy, trace


def solve_nominal(
    model: ModelSpec,
    pop: PopulationConfig,
    theta,
    budgets: BudgetConfig,
    objective: ObjectiveSpec,
    ga: GaConfig,
    x0,
    nominal_c2=None,
    step: float = DEFAULT_STEP,
    workers: int = 1,
) -> tuple[VaccinePolicy, list[dict]]:
    """Solve the single-scenario allocation program at point parameters."""
    theta = model.theta_array(theta)
    c2 = None
    if nominal_c2 is not None:
        c2 = np.asarray(nominal_c2, dtype=float).reshape(1, -1)
    scen = ScenarioSet(
        param_names=tuple(model.param_names),
        thetas=theta[None, :],
        probabilities=np.array([1.0]),
        c2=c2,
    )
    with ScenarioBatchEvaluator(
        model, pop, scen, objective, budgets, x0, step=step, workers=workers
    ) as ev:
        return ga_optimize(ev, budgets, ga)


def solve_stochastic(
    model: ModelSpec,
    pop: PopulationConfig,
    scenarios: ScenarioSet,
    budgets: BudgetConfig,
    objective: ObjectiveSpec,
    ga: GaConfig,
    x0,
    step: float = DEFAULT_STEP,
    workers: int = 1,
) -> tuple[VaccinePolicy, list[dict]]:
    """Solve the allocation program over the full scenario set."""
    with ScenarioBatchEvaluator(
        model, pop, scenarios, objective, budgets, x0, step=step, workers=workers
    ) as ev:
        return ga_optimize(ev, budgets, ga)
