"""MFPC scores from participant weight vectors.

Participants project their own signals on the shared basis and send only the
weight vectors. The server centers the pooled weights, takes their SVD and
rotates them into decorrelated scores. On complete data whose centered
dominant subspace lies inside the basis span this reproduces the pooled
FPCA scores exactly (up to sign).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .baseline import fix_signs
from .signals import LocalDataset, ObservedSignal
from .subspace import RCOND, SignalPack, SubspaceBasis, batch_weights, project_weights

_FPSC_MAGIC = b"FPSC"
_FPSC_VERSION = 1
_FPSC_HEADER = struct.Struct("<4sBII")
FVE_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class WeightBlock:
    """Weight vectors of one participant's signals, one column per signal."""

    participant_id: str
    W: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError("weight block must be K x J_i")
        if not np.all(np.isfinite(W)):
            raise ValueError(f"non-finite weights from {self.participant_id!r}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "participant_id", str(self.participant_id))

    @property
    def K(self) -> int:
        return self.W.shape[0]

    @property
    def J(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True, eq=False)
class ScoreBundle:
    """Server output: rotation ``P``, mean weight, singular values and per-participant scores.

    Scores are stored for all ``K`` basis directions in decreasing singular
    value order; callers keep the leading components they need.
    """

    rotation: np.ndarray
    mean_weight: np.ndarray
    singular_values: np.ndarray
    blocks: tuple

    @property
    def K(self) -> int:
        return self.rotation.shape[0]

    @property
    def participant_ids(self) -> list[str]:
        return [pid for pid, _ in self.blocks]

    def block(self, participant_id: str) -> np.ndarray:
        for pid, z in self.blocks:
            if pid == participant_id:
                return z
        raise KeyError(participant_id)

    @property
    def scores(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros((self.K, 0))
        return np.hstack([z for _, z in self.blocks])

    def dominant_basis(self, basis) -> np.ndarray:
        """Eigen-directions on the signal grid, ``U P``."""
        U = basis.U if isinstance(basis, SubspaceBasis) else np.asarray(basis)
        return U @ self.rotation

    def for_participant(self, participant_id: str) -> "ScoreBundle":
        """Shared factors plus only this participant's scores."""
        return ScoreBundle(self.rotation, self.mean_weight, self.singular_values,
                           ((participant_id, self.block(participant_id)),))

    def to_bytes(self) -> bytes:
        K = self.K
        parts = [_FPSC_HEADER.pack(_FPSC_MAGIC, _FPSC_VERSION, K, len(self.blocks)),
                 self.rotation.astype("<f8").tobytes(),
                 self.mean_weight.astype("<f8").tobytes(),
                 self.singular_values.astype("<f8").tobytes()]
        for pid, z in self.blocks:
            raw = pid.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", z.shape[1]))
            parts.append(np.ascontiguousarray(z).astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ScoreBundle":
        magic, version, K, nb = _FPSC_HEADER.unpack_from(buf)
        if magic != _FPSC_MAGIC:
            raise ValueError(f"bad score bundle magic {magic!r}")
        if version != _FPSC_VERSION:
            raise ValueError(f"unsupported score bundle version {version}")
        pos = _FPSC_HEADER.size

        def take(n):
            nonlocal pos
            if pos + 8 * n > len(buf):
                raise ValueError("truncated score bundle")
            a = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            return a

        P = take(K * K).reshape(K, K)
        wbar = take(K)
        d = take(K)
        blocks = []
        for _ in range(nb):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pid = buf[pos + 2: pos + 2 + ln].decode("utf-8")
            (J,) = struct.unpack_from("<I", buf, pos + 2 + ln)
            pos += 6 + ln
            blocks.append((pid, take(K * J).reshape(K, J)))
        if pos != len(buf):
            raise ValueError(f"{len(buf) - pos} trailing bytes in score bundle")
        return cls(P, wbar, d, tuple(blocks))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ScoreBundle":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def local_weights(basis: SubspaceBasis, dataset: LocalDataset, rcond: float = RCOND) -> WeightBlock:
    """Least-squares weights of each of a participant's signals on the basis."""
    if len(dataset) == 0:
        return WeightBlock(dataset.participant_id, np.zeros((basis.K, 0)))
    W = batch_weights(basis, SignalPack.from_signals(dataset.signals, basis.N), rcond)
    return WeightBlock(dataset.participant_id, W)


def server_scores(blocks: Sequence[WeightBlock], basis=None) -> ScoreBundle:
    """Center the pooled weights, rotate by their left singular vectors and split by participant.

    Parameters
    ----------
    blocks : sequence of WeightBlock
        In roster order; total column count must be at least 2.
    basis : SubspaceBasis or ndarray, optional
        When given, column signs of ``P`` are chosen so that the largest entry
        of each column of ``U P`` is positive (the pooled-FPCA convention).
        Otherwise the convention is applied to ``P`` itself.
    """
    blocks = list(blocks)
    if not blocks:
        raise ValueError("no weight blocks")
    Ks = {b.K for b in blocks}
    if len(Ks) != 1:
        raise ValueError(f"weight blocks disagree on K: {sorted(Ks)}")
    K = Ks.pop()
    W = np.hstack([b.W for b in blocks])
    J = W.shape[1]
    if J < 2:
        raise ValueError(f"need at least 2 signals in total to center, got {J}")
    wbar = W.sum(axis=1) / J
    Wc = W - wbar[:, None]
    # a square P needs the full factor only when J < K; the J x J right factor is never wanted
    P, d, _ = np.linalg.svd(Wc, full_matrices=J < K)
    d = np.concatenate([d, np.zeros(K - d.size)])
    if basis is not None:
        U = basis.U if isinstance(basis, SubspaceBasis) else np.asarray(basis)
        sgn = fix_signs(U @ P)
    else:
        sgn = fix_signs(P)
    P = P * sgn
    Z = P.T @ Wc
    out, lo = [], 0
    for b in blocks:
        out.append((b.participant_id, Z[:, lo: lo + b.J].copy()))
        lo += b.J
    return ScoreBundle(P, wbar, d, tuple(out))


def score_new_signal(bundle: ScoreBundle, basis, x: ObservedSignal, K: int | None = None,
                     rcond: float = RCOND) -> np.ndarray:
    """Scores of an unseen signal: ``P^T (w - w_bar)`` with least-squares weights ``w``."""
    w = project_weights(basis, x, rcond)
    z = bundle.rotation.T @ (w - bundle.mean_weight)
    return z if K is None else z[:K]


def fve_select(d, T_FVE: float = 0.9) -> int:
    """Smallest number of leading components whose squared singular values reach ``T_FVE``."""
    d = np.asarray(d, dtype=np.float64)
    if not 0.0 < T_FVE <= 1.0:
        raise ValueError(f"FVE threshold must be in (0, 1], got {T_FVE}")
    if np.any(np.diff(d) > 0):
        raise ValueError("singular values must be nonincreasing")
    tot = float(np.sum(d * d))
    if not tot > 0.0:
        raise ValueError("all singular values are zero")
    frac = np.cumsum(d * d) / tot
    return int(np.argmax(frac >= T_FVE - FVE_ATOL)) + 1
