"""Dominant subspace tracking from incomplete signals.

Each signal updates an orthonormal ``N x K`` basis by one rank-preserving
incremental-SVD step: least-squares weights on the observed rows, imputation of
the unobserved rows from the current basis, then a rotation of the basis
towards the normalized residual. The heavy loop lives in the kernel backend
(:mod:`fedprog._kernels`); this module holds the data types, single-signal
operations and the single-holder tracker.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import subspace_angles

from ._kernels import backend
from .signals import ObservedSignal

RCOND = 1e-10
SKIP_RTOL = 1e-10
REORTH_EVERY = 100

_FPSB_MAGIC = b"FPSB"
_FPSB_VERSION = 1
_FPSB_HEADER = struct.Struct("<4sBII")


class DataError(ValueError):
    """Input data cannot be used (for example an all-zero observed signal)."""


@dataclass(eq=False)
class SubspaceBasis:
    """Orthonormal basis of the tracked subspace.

    ``updates`` counts the basis rotations performed so far; it travels with
    the basis so periodic re-orthonormalization happens at the same points no
    matter which participant holds the token.
    """

    U: np.ndarray
    updates: int = 0

    def __post_init__(self):
        U = np.ascontiguousarray(self.U, dtype=np.float64)
        if U.ndim != 2 or U.shape[1] < 1 or U.shape[1] > U.shape[0]:
            raise ValueError(f"basis must be N x K with 1 <= K <= N, got {U.shape}")
        self.U = U
        self.updates = int(self.updates)

    @property
    def N(self) -> int:
        return self.U.shape[0]

    @property
    def K(self) -> int:
        return self.U.shape[1]

    def copy(self) -> "SubspaceBasis":
        return SubspaceBasis(self.U.copy(), self.updates)

    def orthonormality_error(self) -> float:
        return float(np.abs(self.U.T @ self.U - np.eye(self.K)).max())

    def to_bytes(self) -> bytes:
        return _FPSB_HEADER.pack(_FPSB_MAGIC, _FPSB_VERSION, self.N, self.K) + self.U.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, updates: int = 0) -> "SubspaceBasis":
        if len(buf) < _FPSB_HEADER.size:
            raise ValueError("truncated basis checkpoint")
        magic, version, N, K = _FPSB_HEADER.unpack_from(buf)
        if magic != _FPSB_MAGIC:
            raise ValueError(f"bad basis magic {magic!r}")
        if version != _FPSB_VERSION:
            raise ValueError(f"unsupported basis checkpoint version {version}")
        body = buf[_FPSB_HEADER.size:]
        if len(body) != 8 * N * K:
            raise ValueError(f"basis checkpoint holds {len(body)} bytes, expected {8 * N * K}")
        return cls(np.frombuffer(body, dtype="<f8").reshape(N, K).astype(np.float64), updates)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SubspaceBasis":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True, eq=False)
class UpdateOutcome:
    basis: SubspaceBasis
    weight: np.ndarray
    residual_norm: float
    signal_norm: float
    skipped: bool = False


@dataclass(frozen=True)
class TrackerOptions:
    """Stopping and numerical controls of the tracker.

    Parameters
    ----------
    max_sweeps : int
        Upper bound on passes over all signals.
    conv_eps : float
        A sweep whose total relative residual falls below this stops tracking.
    reorth_every : int
        Re-orthonormalize after this many performed updates (0 disables).
    skip_rtol : float
        Updates with ``|r| <= skip_rtol * |x_imputed|`` are skipped.
    rcond : float
        Relative singular-value cut of the least-squares weight solve.
    """

    max_sweeps: int = 100
    conv_eps: float = 1e-6
    reorth_every: int = REORTH_EVERY
    skip_rtol: float = SKIP_RTOL
    rcond: float = RCOND

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.conv_eps < 0:
            raise ValueError("conv_eps must be >= 0")


def init_subspace(N: int, K: int, seed) -> SubspaceBasis:
    """Orthonormalized ``N x K`` standard Gaussian matrix, deterministic in ``seed``."""
    if not 1 <= K <= N:
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={N}")
    G = np.random.default_rng(seed).standard_normal((N, K))
    U = np.ascontiguousarray(G)
    backend.reorthonormalize(U)
    return SubspaceBasis(U, 0)


def _as_basis(U) -> SubspaceBasis:
    return U if isinstance(U, SubspaceBasis) else SubspaceBasis(U)


def project_weights(U, x: ObservedSignal, rcond: float = RCOND) -> np.ndarray:
    """Minimum-norm least-squares coefficients of ``x`` on the observed rows of ``U``."""
    basis = _as_basis(U)
    if x.N != basis.N:
        raise ValueError(f"signal length {x.N} does not match basis N={basis.N}")
    return np.asarray(backend.solve_weights(basis.U, x.observed, np.ascontiguousarray(x.observed_values), rcond))


def impute(U, w, x: ObservedSignal) -> np.ndarray:
    """Observed entries of ``x`` with the gaps filled from ``U @ w``."""
    basis = _as_basis(U)
    out = basis.U @ np.asarray(w, dtype=np.float64)
    out[x.observed] = x.observed_values
    return out


def update_basis(U, x: ObservedSignal, skip_rtol: float = SKIP_RTOL, rcond: float = RCOND,
                 reorth_every: int = REORTH_EVERY) -> UpdateOutcome:
    """One incremental-SVD step of the basis on signal ``x``; the input is not modified."""
    basis = _as_basis(U).copy()
    if x.N != basis.N:
        raise ValueError(f"signal length {x.N} does not match basis N={basis.N}")
    indptr = np.array([0, x.observed.size], dtype=np.int64)
    try:
        updates, res, sig, W, skipped = backend.sweep(
            basis.U, indptr, x.observed, np.ascontiguousarray(x.observed_values),
            basis.updates, reorth_every, skip_rtol, rcond)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    basis.updates = int(updates)
    return UpdateOutcome(basis, np.asarray(W[0]), float(res[0]), float(sig[0]), bool(skipped[0]))


def total_residual(outcomes) -> float:
    """Sum of relative observed residuals ``|r_obs| / |x_obs|``, accumulated in order."""
    e = 0.0
    for o in outcomes:
        if not o.signal_norm > 0.0:
            raise DataError("a signal has an all-zero observed part")
        e += o.residual_norm / o.signal_norm
    return e


@dataclass(frozen=True, eq=False)
class SignalPack:
    """Observed parts of a signal list in CSR layout, ready for the kernels."""

    N: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_signals(cls, signals: Sequence[ObservedSignal], N: int | None = None) -> "SignalPack":
        signals = list(signals)
        if N is None:
            if not signals:
                raise ValueError("cannot infer N from an empty signal list")
            N = signals[0].N
        for s in signals:
            if s.N != N:
                raise ValueError(f"signal length {s.N} does not match N={N}")
        sizes = [s.observed.size for s in signals]
        indptr = np.zeros(len(signals) + 1, dtype=np.int64)
        np.cumsum(sizes, out=indptr[1:])
        if signals:
            indices = np.concatenate([s.observed for s in signals]).astype(np.int64)
            values = np.concatenate([s.observed_values for s in signals])
        else:
            indices = np.zeros(0, dtype=np.int64)
            values = np.zeros(0)
        return cls(int(N), indptr, indices, np.ascontiguousarray(values, dtype=np.float64))

    @classmethod
    def concat(cls, packs: Sequence["SignalPack"]) -> "SignalPack":
        packs = list(packs)
        N = packs[0].N
        indptr = [np.zeros(1, dtype=np.int64)]
        off = 0
        for p in packs:
            indptr.append(p.indptr[1:] + off)
            off += int(p.indptr[-1])
        return cls(N, np.concatenate(indptr), np.concatenate([p.indices for p in packs]),
                   np.concatenate([p.values for p in packs]))

    def __len__(self) -> int:
        return self.indptr.size - 1

    def signal(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[s], self.indptr[s + 1]
        return self.indices[lo:hi], self.values[lo:hi]


@dataclass(frozen=True, eq=False)
class SweepResult:
    residual_norms: np.ndarray
    signal_norms: np.ndarray
    weights: np.ndarray
    skipped: np.ndarray

    def contribution(self, e: float = 0.0) -> float:
        """Add this block's relative residuals to a running total, signal by signal."""
        for r, s in zip(self.residual_norms.tolist(), self.signal_norms.tolist()):
            e += r / s
        return e


def sweep(basis: SubspaceBasis, pack: SignalPack, opts: TrackerOptions = TrackerOptions()) -> SweepResult:
    """Update ``basis`` in place with every signal of ``pack`` in order."""
    if pack.N != basis.N:
        raise ValueError(f"signal length {pack.N} does not match basis N={basis.N}")
    if len(pack) == 0:
        z = np.zeros(0)
        return SweepResult(z, z, np.zeros((0, basis.K)), np.zeros(0, dtype=np.uint8))
    try:
        updates, res, sig, W, skipped = backend.sweep(
            basis.U, pack.indptr, pack.indices, pack.values, basis.updates,
            opts.reorth_every, opts.skip_rtol, opts.rcond)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    basis.updates = int(updates)
    return SweepResult(np.asarray(res), np.asarray(sig), np.asarray(W), np.asarray(skipped, dtype=bool))


def batch_weights(basis: SubspaceBasis, pack: SignalPack, rcond: float = RCOND) -> np.ndarray:
    """Least-squares weights of every packed signal, shape ``(K, J)``."""
    if len(pack) == 0:
        return np.zeros((basis.K, 0))
    return np.asarray(backend.batch_weights(basis.U, pack.indptr, pack.indices, pack.values, rcond)).T.copy()


@dataclass
class TrackResult:
    basis: SubspaceBasis
    errors: list = field(default_factory=list)
    converged: bool = False

    @property
    def sweeps(self) -> int:
        return len(self.errors)


def track_subspace(signals, K: int, seed=0, opts: TrackerOptions = TrackerOptions(),
                   basis: SubspaceBasis | None = None) -> TrackResult:
    """Single-holder tracking over ``signals`` (a list of signals or a :class:`SignalPack`)."""
    pack = signals if isinstance(signals, SignalPack) else SignalPack.from_signals(signals)
    if len(pack) == 0:
        raise ValueError("no signals to track")
    if basis is None:
        basis = init_subspace(pack.N, K, seed)
    else:
        basis = basis.copy()
    out = TrackResult(basis)
    for _ in range(opts.max_sweeps):
        e = sweep(basis, pack, opts).contribution()
        out.errors.append(e)
        if e < opts.conv_eps:
            out.converged = True
            break
    return out


def principal_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between the column spans of ``A`` and ``B``."""
    return np.sort(subspace_angles(A, B))
