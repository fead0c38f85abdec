"""Centralized multivariate FPCA on a pooled signal matrix.

This is the non-federated reference: every signal is gathered in one place,
completed if needed, centered, and decomposed with a dense SVD.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .signals import LocalDataset, ObservedSignal
from .subspace import (RCOND, SignalPack, SubspaceBasis, TrackerOptions, backend,
                       batch_weights, track_subspace)


def fix_signs(V: np.ndarray) -> np.ndarray:
    """Per-column signs (+1/-1) that make each column's largest-magnitude entry positive.

    Ties in magnitude resolve to the first index; an all-zero column gets +1.
    """
    V = np.atleast_2d(V)
    if V.shape[0] == 0:
        return np.ones(V.shape[1])
    pick = V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])]
    return np.where(pick < 0, -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class SignalMatrix:
    """Complete ``N x J`` matrix of pooled signals, one column per system."""

    data: np.ndarray
    column_ids: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.data, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("signal matrix must be two-dimensional")
        if not np.all(np.isfinite(X)):
            raise ValueError("signal matrix has undefined entries")
        ids = tuple(self.column_ids) or tuple(range(X.shape[1]))
        if len(ids) != X.shape[1]:
            raise ValueError(f"{len(ids)} column ids for {X.shape[1]} columns")
        object.__setattr__(self, "data", X)
        object.__setattr__(self, "column_ids", ids)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class CentralFactors:
    """Mean, dominant eigenvectors, eigenvalues and scores of a pooled matrix.

    ``span`` holds the leading left singular vectors used to project new,
    possibly incomplete, signals (its first ``K`` columns are ``eigenvectors``);
    it may be wider than ``K`` to leave head-room for the least-squares fit.
    """

    mean: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    scores: np.ndarray
    span: np.ndarray | None = None
    singular_values: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.eigenvectors.shape[1]

    def score(self, x: ObservedSignal, rcond: float = RCOND) -> np.ndarray:
        """Scores of a new signal from its observed entries."""
        B = self.span if self.span is not None else self.eigenvectors
        y = np.ascontiguousarray(x.observed_values - self.mean[x.observed])
        w = np.asarray(backend.solve_weights(np.ascontiguousarray(B), x.observed, y, rcond))
        return w[: self.K]


def central_mfpca(X, K: int, K_span: int | None = None, full_matrices: bool = False) -> CentralFactors:
    """Dense-SVD FPCA of a complete signal matrix.

    Parameters
    ----------
    X : SignalMatrix or ndarray of shape (N, J)
    K : int
        Number of components, ``1 <= K <= min(N, J)``.
    K_span : int, optional
        Width of the stored projection span (defaults to ``K``).
    full_matrices : bool
        Passed to :func:`numpy.linalg.svd`. The non-federated timing benchmark
        uses the full decomposition.
    """
    data = X.data if isinstance(X, SignalMatrix) else SignalMatrix(X).data
    N, J = data.shape
    if not 1 <= K <= min(N, J):
        raise ValueError(f"K must be in [1, {min(N, J)}], got {K}")
    K_span = K if K_span is None else int(K_span)
    if not K <= K_span <= min(N, J):
        raise ValueError(f"K_span must be in [{K}, {min(N, J)}], got {K_span}")
    mean = data.mean(axis=1)
    Xc = data - mean[:, None]
    U, s, _ = np.linalg.svd(Xc, full_matrices=full_matrices)
    B = U[:, :K_span] * fix_signs(U[:, :K_span])
    Ud = B[:, :K].copy()
    Z = Ud.T @ Xc
    return CentralFactors(mean, Ud, s[:K] ** 2, Z, B, s.copy())


def pooled_signals(datasets: Sequence[LocalDataset]) -> list[ObservedSignal]:
    out = []
    for d in datasets:
        out.extend(d.signals)
    return out


@dataclass(frozen=True, eq=False)
class Completion:
    """Completed pooled matrix together with the tracked basis and its weights."""

    matrix: SignalMatrix
    basis: SubspaceBasis
    weights: np.ndarray
    errors: list


def complete_matrix(datasets: Sequence[LocalDataset], K_sub: int, seed=0,
                    opts: TrackerOptions = TrackerOptions(), fill: str = "observed") -> Completion:
    """Pool every participant's signals and fill the gaps with a single-holder tracker.

    ``fill="observed"`` keeps observed entries and imputes the rest from the
    basis; ``fill="lowrank"`` replaces every column by its basis reconstruction
    ``U w``, which makes the result exactly rank ``K_sub``.
    """
    signals = pooled_signals(datasets)
    if not signals:
        raise ValueError("no training signals to complete")
    if fill not in ("observed", "lowrank"):
        raise ValueError(f"unknown fill {fill!r}")
    pack = SignalPack.from_signals(signals)
    tr = track_subspace(pack, K_sub, seed=seed, opts=opts)
    W = batch_weights(tr.basis, pack, opts.rcond)
    Xh = tr.basis.U @ W
    if fill == "observed":
        for j, s in enumerate(signals):
            Xh[s.observed, j] = s.observed_values
    ids = tuple(s.system_id if s.system_id is not None else j for j, s in enumerate(signals))
    return Completion(SignalMatrix(Xh, ids), tr.basis, W, tr.errors)


def impute_then_centralize(datasets: Sequence[LocalDataset], K: int, K_sub: int | None = None, seed=0,
                           opts: TrackerOptions = TrackerOptions(), fill: str = "observed",
                           full_matrices: bool = False) -> CentralFactors:
    """Complete the pooled matrix with the tracker, then run :func:`central_mfpca`.

    ``K_sub`` is the tracker rank (default ``K + 1``); it also sets the width
    of the projection span used to score new signals.
    """
    datasets = list(datasets)
    if not datasets or not any(len(d) for d in datasets):
        raise ValueError("impute_then_centralize needs at least one signal")
    grids = {d.grid for d in datasets}
    if len(grids) != 1:
        raise ValueError("datasets must share one grid")
    K_sub = K + 1 if K_sub is None else int(K_sub)
    comp = complete_matrix(datasets, K_sub, seed=seed, opts=opts, fill=fill)
    J = comp.matrix.shape[1]
    span = min(K_sub, J - 1) if fill == "lowrank" else K_sub
    return central_mfpca(comp.matrix, K, K_span=max(K, span), full_matrices=full_matrices)
