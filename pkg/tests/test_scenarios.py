"""Scenario reduction and transport tests.

The transport LP is cross-checked by enumerating candidate basic
feasible plans directly; the clustering optimality check uses the fact
that, for squared costs, the best k-point approximation equals the best
partition-into-k-clusters score, which is enumerable at tiny sizes.
"""

import itertools

import numpy as np
import pytest

from epialloc.errors import DomainError, StructuralError
from epialloc.scenarios import (
    DiscreteDistribution,
    ScenarioSet,
    augment_onset,
    distribution_mode,
    reduce_scenarios,
    wasserstein_distance,
)


def lp_by_enumeration(xp, wp, xq, wq, order=2.0):
    """Minimum transport cost over enumerated candidate basic plans."""
    n, m = len(wp), len(wq)
    cost = (
        np.sqrt(((xp[:, None, :] - xq[None, :, :]) ** 2).sum(axis=2)) ** order
    ).ravel()
    a = np.zeros((n + m, n * m))
    for i in range(n):
        a[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a[n + j, j::m] = 1.0
    b = np.concatenate([wp, wq])
    best = np.inf
    cells = range(n * m)
    for size in range(1, n + m):
        for support in itertools.combinations(cells, size):
            cols = a[:, support]
            gamma, *_ = np.linalg.lstsq(cols, b, rcond=None)
            if np.any(gamma < -1e-9):
                continue
            if np.max(np.abs(cols @ gamma - b)) > 1e-9:
                continue
            best = min(best, float(cost[list(support)] @ gamma))
    return best ** (1.0 / order)


def partition_optimum_cost(points, weights, m):
    """Exact minimum weighted within-cluster squared cost over all
    labelings into at most m clusters (vectorized enumeration)."""
    n, d = points.shape
    labelings = np.array(
        list(itertools.product(range(m), repeat=n)), dtype=np.int8
    )
    total = float(np.dot(weights, (points**2).sum(axis=1)))
    wx = weights[:, None] * points
    reduction = np.zeros(labelings.shape[0])
    for j in range(m):
        mask = (labelings == j).astype(float)
        wj = mask @ weights
        sx = mask @ wx
        with np.errstate(divide="ignore", invalid="ignore"):
            contrib = (sx**2).sum(axis=1) / wj
        reduction += np.where(wj > 0, contrib, 0.0)
    return total - reduction.max()


# ---------------------------------------------------------------------------
# Transport distance
# ---------------------------------------------------------------------------


def test_wasserstein_identity_is_zero():
    d = DiscreteDistribution(locations=[[0.1, 2.0], [1.0, -1.0]], probabilities=[0.4, 0.6])
    assert wasserstein_distance(d, d) == pytest.approx(0.0, abs=1e-9)


def test_wasserstein_split_mass_hand_value():
    p = DiscreteDistribution(locations=[[0.0], [2.0]], probabilities=[0.5, 0.5])
    q = DiscreteDistribution(locations=[[1.0]], probabilities=[1.0])
    assert wasserstein_distance(p, q, order=2) == pytest.approx(1.0, abs=1e-9)
    assert wasserstein_distance(p, q, order=1) == pytest.approx(1.0, abs=1e-9)


def test_wasserstein_matches_enumerated_plans():
    rng = np.random.default_rng(77)
    for _ in range(15):
        xp = rng.normal(size=(3, 2))
        xq = rng.normal(size=(2, 2))
        wp = rng.dirichlet(np.ones(3))
        wq = rng.dirichlet(np.ones(2))
        got = wasserstein_distance((xp, wp), (xq, wq), order=2)
        want = lp_by_enumeration(xp, wp, xq, wq, order=2)
        assert got == pytest.approx(want, abs=1e-9)


def test_wasserstein_guards():
    with pytest.raises(DomainError):
        wasserstein_distance(([[0.0]], [0.6]), ([[1.0]], [1.0]))
    with pytest.raises(DomainError):
        big = np.zeros((101, 1)), np.full(101, 1 / 101)
        wasserstein_distance(big, (np.zeros((100, 1)), np.full(100, 0.01)))
    with pytest.raises(DomainError):
        wasserstein_distance(([[0.0]], [1.0]), ([[1.0]], [1.0]), order=0.5)
    with pytest.raises(StructuralError):
        wasserstein_distance(([[0.0]], [1.0]), ([[1.0, 2.0]], [1.0]))


def test_wasserstein_nearest_assignment_identity():
    # with free target weights on fixed support points, the optimal plan
    # sends every source point to its nearest target
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(12, 2))
    p = DiscreteDistribution.from_samples(pts)
    cents = rng.normal(size=(3, 2))
    d2 = ((pts[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    q_w = np.array([p.probabilities[nearest == j].sum() for j in range(3)])
    keep = q_w > 0
    q = DiscreteDistribution(locations=cents[keep], probabilities=q_w[keep])
    want = float(np.dot(p.probabilities, d2.min(axis=1))) ** 0.5
    assert wasserstein_distance(p, q, order=2) == pytest.approx(want, abs=1e-9)


# ---------------------------------------------------------------------------
# Reduction
# ---------------------------------------------------------------------------


def test_reduce_k_equals_n_is_lossless():
    pts = np.array([[0.0, 0.0], [1.0, 0.5], [2.0, -1.0]])
    reduced, cost = reduce_scenarios(pts, k=3, seed=1)
    assert cost == pytest.approx(0.0, abs=1e-15)
    order = np.argsort(reduced.thetas[:, 0])
    np.testing.assert_allclose(reduced.thetas[order], pts)
    np.testing.assert_allclose(reduced.probabilities, np.full(3, 1 / 3))


def test_reduce_two_well_separated_pairs():
    reduced, cost = reduce_scenarios(np.array([0.0, 0.0, 10.0, 10.0]), k=2, seed=0)
    got = sorted(
        (float(t), float(p)) for t, p in zip(reduced.thetas[:, 0], reduced.probabilities)
    )
    assert got == [(0.0, 0.5), (10.0, 0.5)]
    assert cost == pytest.approx(0.0, abs=1e-15)


def test_reduce_matches_enumerated_partition_optimum():
    rng = np.random.default_rng(31)
    cases = [(7, 2, 2), (9, 3, 1), (10, 3, 2), (12, 3, 3)]
    for n, m, d in cases:
        pts = rng.normal(size=(n, d))
        w = rng.dirichlet(np.ones(n))
        dist = DiscreteDistribution(locations=pts, probabilities=w)
        reduced, cost = reduce_scenarios(dist, k=m, seed=4)
        best = partition_optimum_cost(pts, w, m)
        assert cost == pytest.approx(best, abs=1e-9)
        # the squared transport distance to the reduced set equals the
        # clustering cost at the optimum
        got = wasserstein_distance(dist, reduced.distribution(), order=2)
        assert got**2 == pytest.approx(best, abs=1e-9)


def test_reduce_beats_random_subset_baseline():
    rng = np.random.default_rng(100)
    pts = rng.normal(size=(400, 3)) * np.array([1.0, 0.5, 2.0])
    dist = DiscreteDistribution.from_samples(pts)
    wins = 0
    for trial in range(20):
        reduced, cost = reduce_scenarios(dist, k=20, seed=trial, restarts=4)
        pick = np.random.default_rng(1000 + trial).choice(400, size=20, replace=False)
        cents = pts[pick]
        d2 = ((pts[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        baseline = float(np.dot(dist.probabilities, d2))
        wins += cost < baseline
    assert wins >= 18


def test_reduce_cost_nonincreasing_in_k():
    rng = np.random.default_rng(8)
    pts = rng.normal(size=(60, 2))
    costs = [reduce_scenarios(pts, k=k, seed=2)[1] for k in (2, 4, 8)]
    assert costs[0] >= costs[1] >= costs[2]


def test_reduce_preserves_weighted_mean():
    rng = np.random.default_rng(12)
    pts = rng.normal(size=(200, 3))
    w = rng.dirichlet(np.ones(200))
    dist = DiscreteDistribution(locations=pts, probabilities=w)
    reduced, _ = reduce_scenarios(dist, k=7, seed=3)
    np.testing.assert_allclose(
        reduced.probabilities @ reduced.thetas, w @ pts, rtol=1e-12, atol=1e-12
    )
    assert reduced.probabilities.sum() == pytest.approx(1.0, abs=1e-10)


def test_reduce_standardized_space_option():
    rng = np.random.default_rng(44)
    pts = np.column_stack([rng.normal(size=80), 1000.0 * rng.normal(size=80)])
    plain, _ = reduce_scenarios(pts, k=4, seed=0)
    scaled, _ = reduce_scenarios(pts, k=4, seed=0, standardize=True)
    assert plain.thetas.shape == scaled.thetas.shape == (4, 2)
    # standardization changes which clusters form when scales are wild
    assert not np.allclose(
        np.sort(plain.thetas[:, 0]), np.sort(scaled.thetas[:, 0])
    )


def test_reduce_validation():
    pts = np.zeros((5, 2))
    with pytest.raises(DomainError):
        reduce_scenarios(pts, k=0)
    with pytest.raises(DomainError):
        reduce_scenarios(pts, k=6)
    with pytest.raises(StructuralError):
        reduce_scenarios(pts, k=2, param_names=("a",))


def test_reduce_accepts_chain_like_objects():
    class FakeChain:
        param_names = ("alpha", "beta")
        samples = np.array([[0.1, 0.2], [0.1, 0.2], [0.9, 0.8], [0.9, 0.8]])

    reduced, cost = reduce_scenarios(FakeChain(), k=2, seed=0)
    assert reduced.param_names == ("alpha", "beta")
    assert cost == pytest.approx(0.0, abs=1e-15)


# ---------------------------------------------------------------------------
# Onset augmentation
# ---------------------------------------------------------------------------


def base_set():
    return ScenarioSet(
        param_names=("alpha", "beta"),
        thetas=np.array([[0.9, 0.1], [1.1, 0.2], [0.5, 0.3]]),
        probabilities=np.array([0.5, 0.25, 0.25]),
    )


def test_augment_singleton_grid_keeps_probabilities():
    out = augment_onset(base_set(), [[20.0], [30.0]])
    assert out.n == 3
    np.testing.assert_array_equal(out.probabilities, base_set().probabilities)
    np.testing.assert_array_equal(out.c2, np.tile([20.0, 30.0], (3, 1)))


def test_augment_cartesian_product_counts_and_mass():
    out = augment_onset(base_set(), [[19.0, 22.0], [29.0, 32.0]])
    assert out.n == 12
    assert out.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(out.probabilities[:4], np.full(4, 0.5 / 4))
    # first scenario crossed with all four onset combinations, in grid order
    np.testing.assert_array_equal(
        out.c2[:4], [[19.0, 29.0], [19.0, 32.0], [22.0, 29.0], [22.0, 32.0]]
    )
    np.testing.assert_array_equal(out.thetas[:4], np.tile([0.9, 0.1], (4, 1)))


def test_augment_guards():
    with pytest.raises(DomainError):
        augment_onset(base_set(), [[20.0], []])
    out = augment_onset(base_set(), [[20.0], [30.0]])
    with pytest.raises(DomainError):
        augment_onset(out, [[20.0], [30.0]])


# ---------------------------------------------------------------------------
# Mode estimation
# ---------------------------------------------------------------------------


def test_mode_single_scenario_is_its_parameters():
    s = ScenarioSet(
        param_names=("a", "b"), thetas=np.array([[0.7, 0.3]]), probabilities=[1.0]
    )
    np.testing.assert_array_equal(distribution_mode(s), [0.7, 0.3])


def test_mode_of_truncated_gaussian_cloud():
    rng = np.random.default_rng(2)
    draws = rng.normal(5.0, 1.0, size=300_000)
    draws = draws[(draws >= 0) & (draws <= 10)][:100_000][:, None]
    mode = distribution_mode(DiscreteDistribution.from_samples(draws))
    assert abs(mode[0] - 5.0) < 0.2


def test_mode_respects_weights():
    d = DiscreteDistribution(
        locations=np.array([[1.0], [3.0]]), probabilities=[0.2, 0.8]
    )
    assert distribution_mode(d)[0] == pytest.approx(3.0, abs=0.05)


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


def test_discrete_distribution_validation():
    with pytest.raises(DomainError):
        DiscreteDistribution(locations=[[0.0]], probabilities=[0.5])
    with pytest.raises(DomainError):
        DiscreteDistribution(locations=[[0.0], [1.0]], probabilities=[1.5, -0.5])
    with pytest.raises(StructuralError):
        DiscreteDistribution(locations=[[0.0]], probabilities=[0.5, 0.5])


def test_scenario_set_roundtrip_and_validation():
    out = augment_onset(base_set(), [[19.0, 22.0], [29.0, 32.0]])
    again = ScenarioSet.from_dict(out.to_dict())
    np.testing.assert_array_equal(again.thetas, out.thetas)
    np.testing.assert_array_equal(again.c2, out.c2)
    np.testing.assert_array_equal(again.probabilities, out.probabilities)
    assert again.param_names == out.param_names
    with pytest.raises(DomainError):
        ScenarioSet(
            param_names=("a",), thetas=np.array([[1.0]]), probabilities=[0.9]
        )
