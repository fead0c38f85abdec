import numpy as np
import pytest

from conftest import lowrank_datasets
from fedprog.baseline import central_mfpca, complete_matrix, fix_signs, impute_then_centralize
from fedprog.subspace import TrackerOptions


def test_identical_columns_give_zero():
    X = np.tile(np.arange(6.0)[:, None], (1, 4))
    f = central_mfpca(X, 2)
    np.testing.assert_allclose(f.eigenvalues, 0, atol=1e-24)
    np.testing.assert_allclose(f.scores, 0, atol=1e-12)
    np.testing.assert_allclose(f.mean, np.arange(6.0))


def test_two_column_closed_form():
    u = np.array([0.6, 0.0, 0.8])
    xbar = np.array([1.0, 2.0, 3.0])
    X = xbar[:, None] + np.outer(u, [1.0, -1.0])
    f = central_mfpca(X, 1)
    # centered matrix u (1, -1) has singular value sqrt(2), so eigenvalue 2 and scores +-1
    assert f.eigenvalues[0] == pytest.approx(2.0)
    np.testing.assert_allclose(np.abs(f.scores), [[1.0, 1.0]], atol=1e-12)
    assert f.scores[0, 0] == pytest.approx(-f.scores[0, 1])
    np.testing.assert_allclose(np.abs(f.eigenvectors[:, 0]), u, atol=1e-12)


def test_scores_are_centered(rng):
    f = central_mfpca(rng.standard_normal((20, 9)), 4)
    np.testing.assert_allclose(f.scores.sum(axis=1), 0, atol=1e-10)
    assert np.all(fix_signs(f.eigenvectors) == 1)


def test_full_matrices_same_factors(rng):
    X = rng.standard_normal((15, 8))
    a, b = central_mfpca(X, 3), central_mfpca(X, 3, full_matrices=True)
    np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)


def test_k_bounds(rng):
    with pytest.raises(ValueError):
        central_mfpca(rng.standard_normal((5, 3)), 4)
    with pytest.raises(ValueError):
        central_mfpca(np.array([[1.0, np.nan]]), 1)


def test_fix_signs():
    V = np.array([[0.1, -3.0, 0.0], [-0.5, 2.0, 0.0]])
    np.testing.assert_array_equal(fix_signs(V), [-1, -1, 1])


def test_complete_input_no_op():
    parts, X, _ = lowrank_datasets(N=40, sizes=(8, 6), noise=0.3)
    f1 = impute_then_centralize(parts, 3)
    f2 = central_mfpca(X, 3, K_span=4)
    np.testing.assert_allclose(f1.scores, f2.scores, atol=1e-10)


def test_completion_recovers_missing_entries():
    parts, X, _ = lowrank_datasets(N=50, sizes=(20, 20), K=3, missing=0.3, offset=0.0, seed=2)
    comp = complete_matrix(parts, 3, opts=TrackerOptions(max_sweeps=500))
    err = np.linalg.norm(comp.matrix.data - X) / np.linalg.norm(X)
    assert err < 1e-4


def test_lowrank_fill_is_rank_k_sub():
    parts, X, _ = lowrank_datasets(N=30, sizes=(10,), missing=0.2, noise=0.5)
    comp = complete_matrix(parts, 4, fill="lowrank", opts=TrackerOptions(max_sweeps=20))
    assert np.linalg.matrix_rank(comp.matrix.data, tol=1e-8) == 4


def test_empty_input_rejected():
    parts, _, _ = lowrank_datasets(sizes=(3,))
    with pytest.raises(ValueError):
        impute_then_centralize([], 1)
    with pytest.raises(ValueError):
        impute_then_centralize([parts[0].subset([])], 1)
