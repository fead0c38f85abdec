import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import lowrank_datasets
from fedprog.signals import ObservedSignal
from fedprog.subspace import (DataError, SignalPack, SubspaceBasis, TrackerOptions, UpdateOutcome, batch_weights,
                              impute, init_subspace, principal_angles, project_weights, sweep, total_residual,
                              track_subspace, update_basis)


def full(x):
    x = np.asarray(x, dtype=float)
    return ObservedSignal(x, np.arange(x.size))


def test_init_square_and_orthonormal():
    b = init_subspace(5, 5, 0)
    np.testing.assert_allclose(b.U.T @ b.U, np.eye(5), atol=1e-12)
    np.testing.assert_allclose(b.U @ b.U.T, np.eye(5), atol=1e-12)
    np.testing.assert_array_equal(init_subspace(40, 3, 9).U, init_subspace(40, 3, 9).U)
    assert init_subspace(40, 3, 9).orthonormality_error() < 1e-12
    with pytest.raises(ValueError):
        init_subspace(3, 4, 0)


def test_weights_exact_membership(rng):
    b = init_subspace(30, 4, 1)
    c = rng.standard_normal(4)
    np.testing.assert_allclose(project_weights(b, full(b.U @ c)), c, atol=1e-12)


def test_weights_orthogonal_signal_is_zero(rng):
    b = init_subspace(30, 4, 1)
    x = rng.standard_normal(30)
    x -= b.U @ (b.U.T @ x)
    np.testing.assert_allclose(project_weights(b, full(x)), 0, atol=1e-12)


def test_weights_underdetermined_is_min_norm(rng):
    b = init_subspace(30, 4, 2)
    x = b.U @ rng.standard_normal(4)
    s = ObservedSignal(x, [3, 17])
    w = project_weights(b, s)
    w_oracle = np.linalg.pinv(b.U[[3, 17]]) @ x[[3, 17]]
    np.testing.assert_allclose(w, w_oracle, atol=1e-10)
    np.testing.assert_allclose(b.U[[3, 17]] @ w, x[[3, 17]], atol=1e-10)


def test_impute_examples():
    b = init_subspace(10, 2, 0)
    x = np.arange(10.0)
    np.testing.assert_array_equal(impute(b, [0.3, 0.1], full(x)), x)
    s = ObservedSignal(x, [1, 4])
    out = impute(b, np.zeros(2), s)
    assert out[1] == 1 and out[4] == 4 and np.all(out[[0, 2, 3, 5, 6, 7, 8, 9]] == 0)
    u = np.ones((10, 1)) / np.sqrt(10)
    s = ObservedSignal(3 * u[:, 0], [0, 5, 7])
    np.testing.assert_allclose(impute(u, project_weights(u, s), s), 3 * u[:, 0], atol=1e-12)


def test_update_in_span_is_noop(rng):
    b = init_subspace(20, 3, 0)
    out = update_basis(b, full(b.U @ rng.standard_normal(3)))
    assert out.residual_norm < 1e-12
    np.testing.assert_allclose(out.basis.U, b.U, atol=1e-12)


def test_update_two_by_two():
    b = SubspaceBasis(np.array([[1.0], [0.0]]))
    out = update_basis(b, full([0.0, 5.0]))
    np.testing.assert_allclose(out.weight, [0.0])
    assert out.residual_norm == pytest.approx(5.0)
    # middle matrix [[1, 0], [0, 5]] has leading left singular vector e2
    np.testing.assert_allclose(np.abs(out.basis.U[:, 0]), [0.0, 1.0], atol=1e-12)
    np.testing.assert_array_equal(b.U, [[1.0], [0.0]])
    assert out.basis.updates == 1


def test_update_matches_middle_matrix_svd(rng):
    # independent oracle: left singular vectors of [[I, w], [0, |r|]] with the implicit unit weight
    N, K = 12, 3
    b = init_subspace(N, K, 4)
    x = rng.standard_normal(N)
    w = b.U.T @ x
    r = x - b.U @ w
    rn = np.linalg.norm(r)
    M = np.zeros((K + 1, K + 1))
    M[:K, :K] = np.eye(K)
    M[:K, K] = w
    M[K, K] = rn
    Q = np.hstack([b.U, r[:, None] / rn]) @ np.linalg.svd(M)[0][:, :K]
    out = update_basis(b, full(x), reorth_every=0)
    assert principal_angles(out.basis.U, Q).max() < 1e-10


def test_orthonormal_after_many_updates(rng):
    b = init_subspace(25, 4, 0)
    for i in range(10_000):
        obs = np.sort(rng.choice(25, size=rng.integers(1, 26), replace=False))
        x = np.zeros(25)
        x[obs] = rng.standard_normal(obs.size) * 10 ** rng.uniform(-3, 3)
        b = update_basis(b, ObservedSignal(x, obs)).basis if x[obs].any() else b
    assert b.orthonormality_error() < 1e-8


def test_zero_signal_is_data_error():
    with pytest.raises(DataError):
        update_basis(init_subspace(5, 2, 0), full(np.zeros(5)))


def test_total_residual_examples():
    b = SubspaceBasis(np.eye(3)[:, :1])
    assert total_residual([]) == 0.0
    outs = [UpdateOutcome(b, np.zeros(1), 0.1, 1.0), UpdateOutcome(b, np.zeros(1), 0.6, 2.0)]
    assert total_residual(outs) == pytest.approx(0.4)
    assert TrackerOptions().conv_eps == 1e-6


def test_basis_checkpoint_round_trip(tmp_path):
    b = init_subspace(17, 3, 5)
    back = SubspaceBasis.from_bytes(b.to_bytes())
    np.testing.assert_array_equal(back.U, b.U)
    b.save(tmp_path / "b.fpsb")
    np.testing.assert_array_equal(SubspaceBasis.load(tmp_path / "b.fpsb").U, b.U)
    with pytest.raises(ValueError):
        SubspaceBasis.from_bytes(b.to_bytes()[:-8])
    with pytest.raises(ValueError):
        SubspaceBasis.from_bytes(b"XXXX" + b.to_bytes()[4:])


def test_exact_recovery_complete():
    parts, X, B = lowrank_datasets(N=50, sizes=(20,), K=3, offset=0.0)
    res = track_subspace(parts[0].signals, 3, seed=0)
    assert res.converged and res.sweeps <= 100 and res.errors[-1] < 1e-6
    assert principal_angles(res.basis.U, B).max() < 1e-6


def test_recovery_with_missing_entries():
    parts, X, B = lowrank_datasets(N=50, sizes=(20,), K=3, missing=0.3, offset=0.0, seed=3)
    res = track_subspace(parts[0].signals, 3, seed=0, opts=TrackerOptions(max_sweeps=300))
    assert principal_angles(res.basis.U, B).max() < 1e-3


def test_sweep_equals_repeated_update(rng):
    parts, _, _ = lowrank_datasets(N=30, sizes=(7,), missing=0.4, noise=0.1)
    sigs = parts[0].signals
    b1 = init_subspace(30, 4, 1)
    b2 = b1.copy()
    sweep(b1, SignalPack.from_signals(sigs))
    for s in sigs:
        b2 = update_basis(b2, s).basis
    np.testing.assert_allclose(b1.U, b2.U, atol=1e-13)
    assert b1.updates == b2.updates


def test_batch_weights_matches_single(rng):
    parts, _, _ = lowrank_datasets(N=30, sizes=(6,), missing=0.5)
    b = init_subspace(30, 4, 0)
    W = batch_weights(b, SignalPack.from_signals(parts[0].signals))
    for j, s in enumerate(parts[0].signals):
        np.testing.assert_allclose(W[:, j], project_weights(b, s), atol=1e-12)


@given(seed=st.integers(0, 10_000), K=st.integers(1, 4), n_obs=st.integers(1, 12))
@settings(max_examples=40, deadline=None)
def test_weights_are_pseudoinverse_solution(seed, K, n_obs):
    rng = np.random.default_rng(seed)
    b = init_subspace(12, K, seed)
    x = rng.standard_normal(12)
    obs = np.sort(rng.choice(12, size=n_obs, replace=False))
    w = project_weights(b, ObservedSignal(x, obs))
    np.testing.assert_allclose(w, np.linalg.pinv(b.U[obs], rcond=1e-10) @ x[obs], atol=1e-8)
