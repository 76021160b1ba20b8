"""Compression of posterior samples into small weighted scenario sets.

Reduction is weighted Lloyd clustering (k-means++ seeding, several
restarts): for squared-distance transport cost, the best k-point
approximation of a discrete distribution is exactly the best weighted
k-means solution, with cluster weights as scenario probabilities.  An
exact transportation-LP distance is provided as a test oracle for small
instances; production reduction never solves the LP.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import DomainError, NumericalError, StructuralError

PROB_TOL_INPUT = 1e-12
PROB_TOL_SET = 1e-10
MASS_TOL = 1e-9
LP_MAX_CELLS = 10_000
DEFAULT_RESTARTS = 10
DEFAULT_MAX_ITER = 300
ASSIGN_CHUNK = 65_536


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite weighted point set in parameter space."""

    locations: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        if loc.ndim == 1:
            loc = loc[:, None]
        if loc.ndim != 2 or loc.shape[0] == 0:
            raise StructuralError("locations must be a nonempty (n, d) array")
        prob = np.asarray(self.probabilities, dtype=float).ravel()
        if prob.size != loc.shape[0]:
            raise StructuralError("one probability per location required")
        if not np.all(np.isfinite(loc)):
            raise DomainError("locations must be finite")
        if np.any(prob < 0) or not np.all(np.isfinite(prob)):
            raise DomainError("probabilities must be nonnegative and finite")
        if abs(prob.sum() - 1.0) > PROB_TOL_INPUT:
            raise DomainError("probabilities must sum to 1 within 1e-12")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "probabilities", prob)

    @classmethod
    def from_samples(cls, points) -> "DiscreteDistribution":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        return cls(locations=pts, probabilities=np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def dim(self) -> int:
        return self.locations.shape[1]


def _as_point_mass(obj) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(obj, DiscreteDistribution):
        return obj.locations, obj.probabilities
    if isinstance(obj, ScenarioSet):
        return obj.thetas, obj.probabilities
    loc, prob = obj
    loc = np.asarray(loc, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None]
    return loc, np.asarray(prob, dtype=float).ravel()


def wasserstein_distance(p, q, order: float = 2.0) -> float:
    """Exact type-``order`` transport distance between small point sets.

    Solves the transportation linear program on the full cost matrix
    ``|x_i - y_j|^order`` and returns the ``order``-th root of the
    optimal cost.  Intended as an oracle: instances are capped at
    ``n * m <= 10^4`` cells.
    """
    if order < 1:
        raise DomainError("order must be at least 1")
    xp, wp = _as_point_mass(p)
    xq, wq = _as_point_mass(q)
    if xp.shape[1] != xq.shape[1]:
        raise StructuralError("point sets live in different dimensions")
    if abs(wp.sum() - wq.sum()) > MASS_TOL:
        raise DomainError("probability mass mismatch beyond 1e-9")
    n, m = xp.shape[0], xq.shape[0]
    if n * m > LP_MAX_CELLS:
        raise DomainError("transport oracle limited to n*m <= 10^4 cells")
    diff = xp[:, None, :] - xq[None, :, :]
    cost = np.sqrt(np.sum(diff * diff, axis=2)) ** order
    # row sums = p, column sums = q over the flattened n*m plan
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([wp, wq])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, method="highs")
    if not res.success:
        raise NumericalError(f"transport LP failed: {res.message}")
    return float(res.fun) ** (1.0 / order)


@dataclass(frozen=True)
class ScenarioSet:
    """Weighted parameter scenarios, optionally with onset midpoints."""

    param_names: tuple[str, ...]
    thetas: np.ndarray
    probabilities: np.ndarray
    c2: np.ndarray | None = None
    source_chain: str | None = None
    k: int | None = None
    seed: int | None = None

    def __post_init__(self):
        thetas = np.asarray(self.thetas, dtype=float)
        if thetas.ndim != 2 or thetas.shape[0] == 0:
            raise StructuralError("thetas must be a nonempty (m, n_params) array")
        if thetas.shape[1] != len(self.param_names):
            raise StructuralError("thetas width must match param_names")
        prob = np.asarray(self.probabilities, dtype=float).ravel()
        if prob.size != thetas.shape[0]:
            raise StructuralError("one probability per scenario required")
        if np.any(prob < 0) or not np.all(np.isfinite(prob)):
            raise DomainError("probabilities must be nonnegative and finite")
        if abs(prob.sum() - 1.0) > PROB_TOL_SET:
            raise DomainError("scenario probabilities must sum to 1 within 1e-10")
        if not np.all(np.isfinite(thetas)):
            raise DomainError("scenario parameters must be finite")
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "probabilities", prob)
        object.__setattr__(self, "param_names", tuple(self.param_names))
        if self.c2 is not None:
            c2 = np.asarray(self.c2, dtype=float)
            if c2.ndim != 2 or c2.shape[0] != thetas.shape[0]:
                raise StructuralError("c2 must be (m, n_subpops)")
            object.__setattr__(self, "c2", c2)

    @property
    def n(self) -> int:
        return self.thetas.shape[0]

    def distribution(self) -> DiscreteDistribution:
        return DiscreteDistribution(
            locations=self.thetas, probabilities=self.probabilities
        )

    def theta_map(self, i: int) -> dict:
        return {n: float(v) for n, v in zip(self.param_names, self.thetas[i])}

    def to_dict(self) -> dict:
        return {
            "param_names": list(self.param_names),
            "scenarios": [
                {
                    "theta": [float(v) for v in self.thetas[i]],
                    "c2": None if self.c2 is None else [float(v) for v in self.c2[i]],
                    "p": float(self.probabilities[i]),
                }
                for i in range(self.n)
            ],
            "source_chain": self.source_chain,
            "k": self.k,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ScenarioSet":
        rows = payload["scenarios"]
        c2 = None
        if rows and rows[0].get("c2") is not None:
            c2 = np.array([r["c2"] for r in rows], dtype=float)
        return cls(
            param_names=tuple(payload["param_names"]),
            thetas=np.array([r["theta"] for r in rows], dtype=float),
            probabilities=np.array([r["p"] for r in rows], dtype=float),
            c2=c2,
            source_chain=payload.get("source_chain"),
            k=payload.get("k"),
            seed=payload.get("seed"),
        )


def _nearest_sq_dist(points: np.ndarray, centroids: np.ndarray):
    """Chunked nearest-centroid assignment; returns (labels, sq_dists)."""
    n = points.shape[0]
    labels = np.empty(n, dtype=np.int64)
    sq = np.empty(n)
    for start in range(0, n, ASSIGN_CHUNK):
        chunk = points[start : start + ASSIGN_CHUNK]
        diff = chunk[:, None, :] - centroids[None, :, :]
        d2 = np.sum(diff * diff, axis=2)
        idx = np.argmin(d2, axis=1)
        labels[start : start + chunk.shape[0]] = idx
        sq[start : start + chunk.shape[0]] = d2[np.arange(chunk.shape[0]), idx]
    return labels, sq


def _seed_centroids(points, weights, k, rng) -> np.ndarray:
    """Weighted k-means++ seeding: spread-out, probability-biased starts."""
    n = points.shape[0]
    first = rng.choice(n, p=weights)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        mass = weights * d2
        total = mass.sum()
        if total > 0:
            idx = rng.choice(n, p=mass / total)
        else:  # all remaining points coincide with chosen centroids
            idx = rng.choice(n, p=weights)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(points, weights, k, rng, max_iter):
    centroids = _seed_centroids(points, weights, k, rng)
    labels = np.full(points.shape[0], -1, dtype=np.int64)
    for _ in range(max_iter):
        new_labels, sq = _nearest_sq_dist(points, centroids)
        for j in range(k):
            mask = new_labels == j
            w = weights[mask].sum()
            if w > 0:
                centroids[j] = (weights[mask, None] * points[mask]).sum(axis=0) / w
            else:
                # revive an empty cluster at the worst-represented point
                far = int(np.argmax(sq))
                centroids[j] = points[far]
                new_labels[far] = j
                sq[far] = 0.0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    labels, sq = _nearest_sq_dist(points, centroids)
    cost = float(np.dot(weights, sq))
    return centroids, labels, cost


def reduce_scenarios(
    samples,
    k: int,
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
    max_iter: int = DEFAULT_MAX_ITER,
    standardize: bool = False,
    param_names=None,
    source_chain: str | None = None,
) -> tuple[ScenarioSet, float]:
    """Compress a weighted sample cloud to ``k`` scenarios.

    ``samples`` may be a DiscreteDistribution, a posterior chain (its
    draws weighted uniformly), or a raw (n, d) array.  Runs weighted
    Lloyd clustering from ``restarts`` seedings and keeps the lowest
    squared-transport cost; scenario probabilities are the cluster
    weights, so the weighted mean is preserved.  Returns the set and the
    achieved cost.
    """
    if hasattr(samples, "samples") and hasattr(samples, "param_names"):
        if param_names is None:
            param_names = tuple(samples.param_names)
        samples = DiscreteDistribution.from_samples(samples.samples)
    elif not isinstance(samples, DiscreteDistribution):
        samples = DiscreteDistribution.from_samples(samples)
    points, weights = samples.locations, samples.probabilities
    n, d = points.shape
    if k <= 0:
        raise DomainError("k must be positive")
    if k > n:
        raise DomainError("k cannot exceed the number of samples")
    if restarts < 1:
        raise DomainError("restarts must be at least 1")
    if param_names is None:
        param_names = tuple(f"x{i + 1}" for i in range(d))
    if len(param_names) != d:
        raise StructuralError("param_names length must match sample dimension")

    work = points
    scale = None
    if standardize:
        mean = points.mean(axis=0)
        scale = np.maximum(points.std(axis=0), 1e-12)
        work = (points - mean) / scale

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centroids, labels, cost = _lloyd(work, weights, k, rng, max_iter)
        if best is None or cost < best[2]:
            best = (centroids, labels, cost)
    centroids, labels, cost = best

    # the weighted mean commutes with the affine standardization, so
    # original-coordinate centroids are recomputed from the raw points
    probs = np.zeros(k)
    out = np.empty((k, d))
    for j in range(k):
        mask = labels == j
        w = weights[mask].sum()
        probs[j] = w
        out[j] = (
            (weights[mask, None] * points[mask]).sum(axis=0) / w if w > 0 else centroids[j]
        )
    reduced = ScenarioSet(
        param_names=tuple(param_names),
        thetas=out,
        probabilities=probs,
        c2=None,
        source_chain=source_chain,
        k=k,
        seed=seed,
    )
    return reduced, cost


def augment_onset(base: ScenarioSet, onset_grid) -> ScenarioSet:
    """Cross every scenario with every onset-midpoint combination.

    ``onset_grid`` holds one candidate list per subpopulation; the
    output enumerates the Cartesian product, splitting each scenario's
    probability uniformly across the combinations.
    """
    if base.c2 is not None:
        raise DomainError("scenario set already carries onset midpoints")
    grids = [np.asarray(g, dtype=float).ravel() for g in onset_grid]
    if not grids or any(g.size == 0 for g in grids):
        raise DomainError("each subpopulation needs at least one onset candidate")
    combos = np.array(list(itertools.product(*grids)), dtype=float)
    n_combo = combos.shape[0]
    m = base.n
    thetas = np.repeat(base.thetas, n_combo, axis=0)
    c2 = np.tile(combos, (m, 1))
    probs = np.repeat(base.probabilities / n_combo, n_combo)
    return ScenarioSet(
        param_names=base.param_names,
        thetas=thetas,
        probabilities=probs,
        c2=c2,
        source_chain=base.source_chain,
        k=base.k,
        seed=base.seed,
    )


def _weighted_quantile(x: np.ndarray, w: np.ndarray, q: float) -> float:
    order = np.argsort(x, kind="stable")
    cum = np.cumsum(w[order])
    cum /= cum[-1]
    return float(x[order][np.searchsorted(cum, q, side="left")])


def distribution_mode(obj) -> np.ndarray:
    """Per-dimension histogram mode of a weighted or uniform point set.

    Bins follow the interquartile-range rule with a floor of 50 bins;
    the mode is the midpoint of the highest-mass bin.
    """
    if hasattr(obj, "samples") and hasattr(obj, "param_names"):
        points = np.asarray(obj.samples, dtype=float)
        weights = np.full(points.shape[0], 1.0 / max(points.shape[0], 1))
    else:
        points, weights = _as_point_mass(obj)
    if points.shape[0] == 0:
        raise DomainError("mode of an empty set is undefined")
    n, d = points.shape
    out = np.empty(d)
    for dim in range(d):
        x = points[:, dim]
        lo, hi = float(x.min()), float(x.max())
        if lo == hi:
            out[dim] = lo
            continue
        iqr = _weighted_quantile(x, weights, 0.75) - _weighted_quantile(
            x, weights, 0.25
        )
        width = 2.0 * iqr * n ** (-1.0 / 3.0)
        bins = int(np.ceil((hi - lo) / width)) if width > 0 else 50
        bins = max(bins, 50)
        counts, edges = np.histogram(x, bins=bins, range=(lo, hi), weights=weights)
        top = int(np.argmax(counts))
        out[dim] = 0.5 * (edges[top] + edges[top + 1])
    return out
