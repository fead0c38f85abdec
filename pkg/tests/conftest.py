import numpy as np
import pytest

from fedprog.signals import GridSpec, LocalDataset, ObservedSignal


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def lowrank_datasets(N=60, sizes=(12, 10, 8), K=3, missing=0.0, noise=0.0, seed=0, offset=3.0):
    """Participants holding columns of an exact rank-K matrix (plus an optional mean profile)."""
    # a separate stream, so the truth never coincides with a tracker start drawn from the same seed
    rng = np.random.default_rng([seed, 99])
    J = sum(sizes)
    B = np.linalg.qr(rng.standard_normal((N, K)))[0]
    X = B @ (rng.standard_normal((K, J)) * np.arange(K, 0, -1)[:, None] * 3)
    X += offset * np.linspace(0.5, 1.5, N)[:, None] + noise * rng.standard_normal((N, J))
    grid = GridSpec((N,))
    ttf = np.exp(0.2 * X[:5].mean(axis=0) + 0.05 * rng.standard_normal(J))
    parts, lo = [], 0
    for i, J_i in enumerate(sizes, start=1):
        sigs = []
        for j in range(lo, lo + J_i):
            if missing:
                obs = np.sort(rng.choice(N, size=int(round((1 - missing) * N)), replace=False))
            else:
                obs = np.arange(N)
            sigs.append(ObservedSignal(X[:, j], obs, f"s{j}"))
        parts.append(LocalDataset(f"user{i}", tuple(sigs), ttf[lo: lo + J_i], grid))
        lo += J_i
    return parts, X, B
