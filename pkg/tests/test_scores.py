import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import lowrank_datasets
from fedprog.baseline import central_mfpca
from fedprog.scores import ScoreBundle, WeightBlock, fve_select, local_weights, score_new_signal, server_scores
from fedprog.signals import ObservedSignal
from fedprog.subspace import SubspaceBasis, init_subspace, track_subspace


def test_complete_weights_are_projections():
    parts, X, _ = lowrank_datasets(N=30, sizes=(7,))
    b = init_subspace(30, 4, 0)
    np.testing.assert_allclose(local_weights(b, parts[0]).W, b.U.T @ X, atol=1e-12)
    assert local_weights(b, parts[0].subset([])).W.shape == (4, 0)


def test_rank_deficient_weights_finite():
    U = np.zeros((6, 2))
    U[0, 0] = U[1, 1] = 1.0
    b = SubspaceBasis(U)
    s = ObservedSignal(np.arange(6.0), [2, 3, 4])
    from fedprog.signals import GridSpec, LocalDataset
    W = local_weights(b, LocalDataset("a", (s,), [1.0], GridSpec((6,)))).W
    assert np.all(np.isfinite(W))
    np.testing.assert_allclose(W, 0, atol=1e-14)


def test_equal_columns_zero_scores():
    W = np.tile([[1.0], [2.0], [3.0]], (1, 5))
    b = server_scores([WeightBlock("a", W[:, :2]), WeightBlock("b", W[:, 2:])])
    np.testing.assert_allclose(b.scores, 0, atol=1e-14)
    np.testing.assert_allclose(b.singular_values, 0, atol=1e-14)


def test_scores_diagonal_covariance(rng):
    blocks = [WeightBlock(f"u{i}", rng.standard_normal((4, n))) for i, n in enumerate((5, 0, 9))]
    b = server_scores(blocks)
    Z = b.scores
    np.testing.assert_allclose(Z @ Z.T, np.diag(b.singular_values ** 2), atol=1e-8)
    assert b.block("u1").shape == (4, 0)
    np.testing.assert_array_equal(np.hstack([b.block(p) for p in ("u0", "u1", "u2")]), Z)
    np.testing.assert_allclose(b.rotation.T @ b.rotation, np.eye(4), atol=1e-12)


def test_fewer_signals_than_rank(rng):
    b = server_scores([WeightBlock("a", rng.standard_normal((5, 3)))])
    assert b.rotation.shape == (5, 5) and b.singular_values.shape == (5,)


def test_matches_pooled_fpca():
    parts, X, _ = lowrank_datasets(N=60, sizes=(12, 10, 8), K=3, noise=0.0)
    res = track_subspace([s for d in parts for s in d.signals], 4, seed=0)
    bundle = server_scores([local_weights(res.basis, d) for d in parts], res.basis)
    ref = central_mfpca(X, 3)
    Z = bundle.scores[:3]
    assert np.max(np.abs(Z - ref.scores)) <= 1e-6 * np.linalg.norm(ref.scores)


def test_new_signal_scoring():
    parts, X, _ = lowrank_datasets(N=40, sizes=(9, 6), noise=0.2)
    res = track_subspace([s for d in parts for s in d.signals], 4, seed=1)
    bundle = server_scores([local_weights(res.basis, d) for d in parts], res.basis)
    x0 = parts[0].signals[2]
    np.testing.assert_allclose(score_new_signal(bundle, res.basis, x0), bundle.block("user1")[:, 2], atol=1e-10)
    mean_sig = ObservedSignal(res.basis.U @ bundle.mean_weight, np.arange(40))
    np.testing.assert_allclose(score_new_signal(bundle, res.basis, mean_sig), 0, atol=1e-12)
    trunc = ObservedSignal(X[:, 0], np.arange(25))
    z = score_new_signal(bundle, res.basis, trunc, K=2)
    assert z.shape == (2,) and np.all(np.isfinite(z))
    # oracle: impute from the least-squares weights, then project the completed signal
    U = res.basis.U
    w = np.linalg.lstsq(U[:25], X[:25, 0], rcond=None)[0]
    xt = U @ w
    xt[:25] = X[:25, 0]
    np.testing.assert_allclose(z, (bundle.rotation.T @ (U.T @ xt - bundle.mean_weight))[:2], atol=1e-8)


def test_bundle_round_trip(tmp_path, rng):
    b = server_scores([WeightBlock("alpha", rng.standard_normal((3, 4))), WeightBlock("β", np.zeros((3, 0)))])
    back = ScoreBundle.from_bytes(b.to_bytes())
    np.testing.assert_array_equal(back.rotation, b.rotation)
    np.testing.assert_array_equal(back.block("alpha"), b.block("alpha"))
    assert back.participant_ids == ["alpha", "β"]
    b.save(tmp_path / "s.fpsc")
    np.testing.assert_array_equal(ScoreBundle.load(tmp_path / "s.fpsc").scores, b.scores)
    with pytest.raises(ValueError):
        ScoreBundle.from_bytes(b.to_bytes() + b"\0")
    assert b.for_participant("alpha").participant_ids == ["alpha"]


def test_fve_examples():
    assert fve_select([3.0, 1.0], 0.9) == 1
    assert fve_select([3.0, 1.0], 0.91) == 2
    assert fve_select([3.0, 1.0]) == 1
    with pytest.raises(ValueError):
        fve_select([0.0, 0.0])
    with pytest.raises(ValueError):
        fve_select([1.0, 2.0])


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=10), st.floats(0.05, 1.0))
@settings(max_examples=80, deadline=None)
def test_fve_is_smallest_sufficient(vals, T):
    d = np.sort(np.array(vals))[::-1]
    k = fve_select(d, T)
    frac = np.cumsum(d ** 2) / np.sum(d ** 2)
    assert frac[k - 1] >= T - 1e-12
    assert k == 1 or frac[k - 2] < T - 1e-12
