import numpy as np
import pytest

from conftest import lowrank_datasets
from fedprog.federation import FederationPlan
from fedprog.lls import FitOptions
from fedprog.pipeline import _cv_scorer
from fedprog.signals import GridSpec, LocalDataset, ObservedSignal
from fedprog.selection import CVPlan, ConfigurationError, default_k_grid, federated_cv, fold_assignment


def test_fold_assignment_balanced_and_deterministic():
    f = fold_assignment("user1", 23, 5, 0)
    assert np.bincount(f).tolist() == [5, 5, 5, 4, 4]
    np.testing.assert_array_equal(f, fold_assignment("user1", 23, 5, 0))
    assert not np.array_equal(f, fold_assignment("user2", 23, 5, 0))


def test_small_participant_excluded_from_cv_only():
    parts, _, _ = lowrank_datasets(sizes=(12, 3, 8))
    plan = CVPlan.build(parts, M=5)
    assert plan.excluded == ["user2"]
    assert len(plan.train_sets(parts, 0)) == 2
    calls = []

    def scorer(train, held, K):
        calls.append({d.participant_id for d in train})
        return np.full(sum(len(h) for h in held), 0.1 * K)

    res = federated_cv(parts, CVPlan.build(parts, M=5, candidate_Ks=[1, 2]), scorer)
    assert res.K_best == 1 and res.excluded == ["user2"]
    assert all(c == {"user1", "user3"} for c in calls)


def test_single_candidate_returned_without_fitting():
    parts, _, _ = lowrank_datasets(sizes=(10,))

    def boom(*a):
        raise AssertionError("should not be called")

    assert federated_cv(parts, CVPlan.build(parts, candidate_Ks=[4]), boom).K_best == 4


def test_ties_and_failures():
    parts, _, _ = lowrank_datasets(sizes=(10,))

    def scorer(train, held, K):
        if K == 1:
            raise RuntimeError("diverged")
        return np.full(sum(len(h) for h in held), 0.5)

    res = federated_cv(parts, CVPlan.build(parts, candidate_Ks=[1, 2, 3]), scorer)
    assert res.K_best == 2 and res.mean_error[1] == np.inf


def test_no_cv_participants():
    parts, _, _ = lowrank_datasets(sizes=(3, 4))
    with pytest.raises(ConfigurationError):
        CVPlan.build(parts, M=5)


def test_default_grid_bounds():
    parts, _, _ = lowrank_datasets(N=60, sizes=(6, 5))
    plan = CVPlan.build(parts, M=5)
    assert default_k_grid(plan, 60) == list(range(1, min(10, plan.min_train_size() - 2) + 1))


@pytest.mark.slow
def test_cv_finds_two_informative_components():
    rng = np.random.default_rng(1)
    N, J = 40, 60
    B = np.linalg.qr(rng.standard_normal((N, 2)))[0]
    S = rng.standard_normal((2, J)) * [[4.0], [2.0]]
    X = 5 + B @ S + 0.05 * rng.standard_normal((N, J))
    ttf = np.exp(1.0 + 0.15 * S[0] - 0.3 * S[1] + 0.02 * rng.standard_normal(J))
    g = GridSpec((N,))
    parts = [LocalDataset(f"user{i}", tuple(ObservedSignal(X[:, j], np.arange(N)) for j in idx), ttf[idx], g)
             for i, idx in enumerate((np.arange(0, 30), np.arange(30, 60)))]
    plan = FederationPlan(max_sweeps=200)
    res = federated_cv(parts, CVPlan.build(parts, candidate_Ks=[1, 2, 5]), _cv_scorer(plan, "lognormal", FitOptions(), 1))
    assert res.K_best == 2
