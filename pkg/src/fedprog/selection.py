"""Choosing the number of scores K: fraction of variance explained or federated M-fold CV."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scores import ScoreBundle, fve_select
from .signals import LocalDataset

log = logging.getLogger(__name__)

MAX_GRID = 10


class ConfigurationError(ValueError):
    pass


def choose_k_fve(bundle: ScoreBundle, T_FVE: float = 0.9) -> int:
    return fve_select(bundle.singular_values, T_FVE)


def fold_assignment(participant_id: str, J: int, M: int, seed: int) -> np.ndarray:
    """Balanced random fold labels ``0..M-1`` for one participant, fixed by (seed, id)."""
    rng = np.random.default_rng([int(seed), zlib.crc32(participant_id.encode("utf-8"))])
    folds = np.empty(J, dtype=np.int64)
    folds[rng.permutation(J)] = np.arange(J) % M
    return folds


@dataclass
class CVPlan:
    """Fold layout. Participants with fewer than ``M`` signals sit out of CV entirely."""

    M: int = 5
    candidate_Ks: list | None = None
    seed: int = 0
    assignments: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    @classmethod
    def build(cls, datasets: Sequence[LocalDataset], M: int = 5, candidate_Ks=None, seed: int = 0) -> "CVPlan":
        if M < 2:
            raise ValueError("need at least 2 folds")
        plan = cls(M, list(candidate_Ks) if candidate_Ks is not None else None, seed)
        for d in sorted(datasets, key=lambda d: d.participant_id):
            if len(d) >= M:
                plan.assignments[d.participant_id] = fold_assignment(d.participant_id, len(d), M, seed)
            else:
                plan.excluded.append(d.participant_id)
        if not plan.assignments:
            raise ConfigurationError(f"no participant has at least M={M} signals for cross-validation")
        return plan

    def train_sets(self, datasets, m: int) -> list[LocalDataset]:
        by_id = {d.participant_id: d for d in datasets}
        return [by_id[pid].subset(np.flatnonzero(f != m)) for pid, f in self.assignments.items()]

    def held_out(self, datasets, m: int) -> list[LocalDataset]:
        by_id = {d.participant_id: d for d in datasets}
        return [by_id[pid].subset(np.flatnonzero(f == m)) for pid, f in self.assignments.items()]

    def min_train_size(self) -> int:
        return min(int(sum(int(np.sum(f != m)) for f in self.assignments.values())) for m in range(self.M))


def default_k_grid(plan: CVPlan, N: int) -> list[int]:
    """``1..min(10, trainable)`` where the regression needs ``K + 2`` samples and the basis ``K + 1 <= N``."""
    top = min(MAX_GRID, plan.min_train_size() - 2, N - 1)
    if top < 1:
        raise ConfigurationError("training folds are too small to fit even one score")
    return list(range(1, top + 1))


@dataclass
class CVResult:
    K_best: int
    candidates: list
    mean_error: dict
    fold_errors: dict
    excluded: list


def federated_cv(datasets: Sequence[LocalDataset], plan: CVPlan, fit_and_score) -> CVResult:
    """Pick K by M-fold cross-validation.

    Parameters
    ----------
    datasets : sequence of LocalDataset
    plan : CVPlan
    fit_and_score : callable
        ``fit_and_score(train_sets, held_out_sets, K) -> array of relative errors``
        trains a complete model on ``train_sets`` and returns the prediction
        errors on every held-out signal. Raising marks that (K, fold) as failed.

    Returns the candidate with the lowest mean held-out error over all folds
    and participants (each held-out signal counts once); ties go to the
    smaller K.
    """
    datasets = sorted(datasets, key=lambda d: d.participant_id)
    Ks = plan.candidate_Ks if plan.candidate_Ks is not None else default_k_grid(plan, datasets[0].grid.N)
    if not Ks:
        raise ValueError("empty candidate list")
    Ks = sorted(set(int(k) for k in Ks))
    if len(Ks) == 1:
        return CVResult(Ks[0], Ks, {Ks[0]: float("nan")}, {}, list(plan.excluded))
    mean_error, fold_errors = {}, {}
    for K in Ks:
        errs, per_fold = [], []
        for m in range(plan.M):
            try:
                e = np.asarray(fit_and_score(plan.train_sets(datasets, m), plan.held_out(datasets, m), K))
            except Exception as exc:  # a failed fit disqualifies this K
                log.warning("CV fold %d for K=%d failed: %s", m, K, exc)
                e = np.array([np.inf])
            errs.append(e)
            per_fold.append(float(np.mean(e)) if e.size else float("nan"))
        allerr = np.concatenate(errs)
        mean_error[K] = float(np.mean(allerr)) if np.all(np.isfinite(allerr)) else float("inf")
        fold_errors[K] = per_fold
    best = min(Ks, key=lambda k: (mean_error[k], k))
    if not np.isfinite(mean_error[best]):
        raise RuntimeError("every candidate K failed during cross-validation")
    return CVResult(best, Ks, mean_error, fold_errors, list(plan.excluded))
