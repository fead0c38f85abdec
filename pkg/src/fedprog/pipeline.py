"""End-to-end training and evaluation for the three modelling modes.

* federated: subspace ring, score round, federated regression;
* individual: the same procedure run by a single participant on its own data;
* non-federated: pool every signal, complete the matrix with a single-holder
  tracker, run dense FPCA and fit the regression on the pooled scores.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import lls
from .baseline import CentralFactors, impute_then_centralize
from .federation import Federation, FederationPlan, modeled_comm_time
from .scores import ScoreBundle, fve_select, score_new_signal
from .selection import CVPlan, CVResult, federated_cv
from .signals import LocalDataset, ObservedSignal
from .subspace import SubspaceBasis

MODES = ("federated", "non-federated", "individual")
SMALL_USER = 5


@dataclass(frozen=True)
class Selection:
    """How K is chosen.

    ``method`` is ``"cv"``, ``"fve"`` or ``"fixed"`` (use ``K``). The tracker
    runs at rank ``K + head_room``; in FVE mode it runs at
    ``min(N, J, fve_rank_cap)`` and K is read off the score singular values.
    """

    method: str = "cv"
    folds: int = 5
    fve_threshold: float = 0.9
    k_grid: tuple | None = None
    K: int | None = None
    head_room: int = 1
    fve_rank_cap: int = 30
    cv_seed: int = 0

    def __post_init__(self):
        if self.method not in ("cv", "fve", "fixed"):
            raise ValueError(f"unknown selection method {self.method!r}")
        if self.method == "fixed" and (self.K is None or self.K < 0):
            raise ValueError("fixed selection needs K >= 0")


@dataclass(eq=False)
class FederatedModel:
    mode: str
    K: int
    K_sub: int
    basis: SubspaceBasis
    bundle: ScoreBundle
    model: lls.LLSModel
    logs: list = field(default_factory=list)
    cv: CVResult | None = None
    timing: dict = field(default_factory=dict)
    participants: list = field(default_factory=list)

    @property
    def family(self) -> str:
        return self.model.family.tag

    def score(self, x: ObservedSignal) -> np.ndarray:
        return score_new_signal(self.bundle, self.basis, x, self.K)

    def predict(self, x: ObservedSignal) -> float:
        return lls.predict_ttf(self.model, self.score(x))[0]

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        self.basis.save(os.path.join(directory, "basis.fpsb"))
        self.bundle.save(os.path.join(directory, "scores.fpsc"))
        self.model.save(os.path.join(directory, "model.txt"))
        meta = {"mode": self.mode, "K": self.K, "K_sub": self.K_sub, "N": self.basis.N, "family": self.family,
                "participants": self.participants, "sweeps": len(self.logs),
                "errors": [l.e for l in self.logs], "timing": self.timing,
                "selected_by": None if self.cv is None else {
                    "candidates": self.cv.candidates,
                    "mean_error": {str(k): v for k, v in self.cv.mean_error.items()},
                    "excluded": self.cv.excluded}}
        with open(os.path.join(directory, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=1)


@dataclass(eq=False)
class CentralModel:
    K: int
    K_sub: int
    factors: CentralFactors
    model: lls.LLSModel
    timing: dict = field(default_factory=dict)
    mode: str = "non-federated"

    @property
    def family(self) -> str:
        return self.model.family.tag

    def score(self, x: ObservedSignal) -> np.ndarray:
        return self.factors.score(x)

    def predict(self, x: ObservedSignal) -> float:
        return lls.predict_ttf(self.model, self.score(x))[0]

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        f = self.factors
        np.savez(os.path.join(directory, "central.npz"), mean=f.mean, eigenvectors=f.eigenvectors,
                 eigenvalues=f.eigenvalues, scores=f.scores, span=f.span)
        self.model.save(os.path.join(directory, "model.txt"))
        with open(os.path.join(directory, "meta.json"), "w") as fh:
            json.dump({"mode": self.mode, "K": self.K, "K_sub": self.K_sub, "N": int(f.mean.size),
                       "family": self.family, "timing": self.timing}, fh, indent=1)


def load_model(directory):
    """Load artifacts written by ``FederatedModel.save`` or ``CentralModel.save``."""
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    model = lls.LLSModel.load(os.path.join(directory, "model.txt"))
    if meta["mode"] == "non-federated":
        z = np.load(os.path.join(directory, "central.npz"))
        f = CentralFactors(z["mean"], z["eigenvectors"], z["eigenvalues"], z["scores"], z["span"])
        return CentralModel(meta["K"], meta["K_sub"], f, model, meta.get("timing", {}))
    basis = SubspaceBasis.load(os.path.join(directory, "basis.fpsb"))
    bundle = ScoreBundle.load(os.path.join(directory, "scores.fpsc"))
    return FederatedModel(meta["mode"], meta["K"], meta["K_sub"], basis, bundle, model,
                          timing=meta.get("timing", {}), participants=meta.get("participants", []))


def fit_federated(datasets: Sequence[LocalDataset], K: int, K_sub: int, plan: FederationPlan = FederationPlan(),
                  family="lognormal", fit_opts: lls.FitOptions = lls.FitOptions(), mode: str = "federated",
                  bundle_K: int | None = None) -> FederatedModel:
    """Train with a fixed number of scores ``K`` and tracker rank ``K_sub``."""
    datasets = list(datasets)
    t0 = time.perf_counter()
    with Federation(datasets, plan) as fed:
        run = fed.run_subspace(K_sub)
        bundle = fed.run_scores(run.basis)
        model = fed.fit_lls(K, family, fit_opts)
        server = fed.server_time
    wall = time.perf_counter() - t0
    local = float(sum(l.local_time for l in run.logs))
    timing = {"local_compute": local, "server_compute": server, "wall": wall,
              "modeled_comm": modeled_comm_time(plan, run.logs), "sweeps": run.sweeps,
              "converged": run.converged}
    return FederatedModel(mode, K, K_sub, run.basis, bundle, model, run.logs, None, timing,
                          [d.participant_id for d in datasets])


def _cv_scorer(plan: FederationPlan, family, fit_opts, head_room):
    cv_plan = replace(plan, straggler_policy="none", record=False, ring_order=None)

    def fit_and_score(train, held, K):
        m = fit_federated(train, K, K + head_room, cv_plan, family, fit_opts)
        return np.concatenate([evaluate(m, h) for h in held if len(h)] or [np.zeros(0)])

    return fit_and_score


def train_federated(datasets: Sequence[LocalDataset], family="lognormal", plan: FederationPlan = FederationPlan(),
                    selection: Selection = Selection(), fit_opts: lls.FitOptions = lls.FitOptions(),
                    mode: str = "federated") -> FederatedModel:
    """Select K, then train the federated model on all participants."""
    datasets = list(datasets)
    J = sum(len(d) for d in datasets)
    N = datasets[0].grid.N
    if selection.method == "fixed":
        return fit_federated(datasets, selection.K, selection.K + selection.head_room, plan, family, fit_opts, mode)
    if selection.method == "fve":
        K_sub = min(N, J, selection.fve_rank_cap)
        with Federation(datasets, plan) as fed:
            run = fed.run_subspace(K_sub)
            bundle = fed.run_scores(run.basis)
            K = min(fve_select(bundle.singular_values, selection.fve_threshold), J - 2)
            if K < 1:
                raise ValueError(f"{J} signals are too few for FVE selection")
            model = fed.fit_lls(K, family, fit_opts)
        return FederatedModel(mode, K, K_sub, run.basis, bundle, model, run.logs, None,
                              {"local_compute": float(sum(l.local_time for l in run.logs)),
                               "modeled_comm": modeled_comm_time(plan, run.logs), "sweeps": run.sweeps},
                              [d.participant_id for d in datasets])
    cv_plan = CVPlan.build(datasets, selection.folds, selection.k_grid, selection.cv_seed)
    res = federated_cv(datasets, cv_plan, _cv_scorer(plan, family, fit_opts, selection.head_room))
    out = fit_federated(datasets, res.K_best, res.K_best + selection.head_room, plan, family, fit_opts, mode)
    out.cv = res
    return out


def train_individual(dataset: LocalDataset, family="lognormal", plan: FederationPlan = FederationPlan(),
                     selection: Selection = Selection(), fit_opts: lls.FitOptions = lls.FitOptions()) -> FederatedModel:
    """One participant trains on its own data (a federation of one).

    With fewer than five signals the basis rank is the sample count ``J`` and
    the regression keeps ``J - 2`` scores, the most it can estimate.
    """
    J = len(dataset)
    plan = replace(plan, straggler_policy="none", ring_order=None)
    if J < 2:
        raise ValueError(f"participant {dataset.participant_id!r} has {J} signal(s); at least 2 are needed")
    if J < SMALL_USER:
        return fit_federated([dataset], J - 2, J, plan, family, fit_opts, "individual")
    return train_federated([dataset], family, plan, selection, fit_opts, mode="individual")


def train_nonfederated(datasets: Sequence[LocalDataset], K: int, K_sub: int | None = None,
                       plan: FederationPlan = FederationPlan(), family="lognormal",
                       fit_opts: lls.FitOptions = lls.FitOptions(), fill: str = "lowrank",
                       full_matrices: bool = False) -> CentralModel:
    """Pool, complete, decompose, then fit the regression centrally."""
    datasets = list(datasets)
    K_sub = K + 1 if K_sub is None else K_sub
    t0 = time.perf_counter()
    factors = impute_then_centralize(datasets, K, K_sub, seed=plan.seed, opts=plan.tracker, fill=fill,
                                     full_matrices=full_matrices)
    t1 = time.perf_counter()
    ttfs = np.concatenate([d.ttfs for d in datasets])
    model = lls.fit_pooled(factors.scores, ttfs, family, fit_opts)
    t2 = time.perf_counter()
    return CentralModel(K, K_sub, factors, model, {"decomposition": t1 - t0, "regression": t2 - t1})


def predict(model, dataset: LocalDataset) -> np.ndarray:
    return np.array([model.predict(x) for x in dataset.signals])


def evaluate(model, dataset: LocalDataset) -> np.ndarray:
    """Relative prediction error of every signal in ``dataset``."""
    if len(dataset) == 0:
        return np.zeros(0)
    return lls.prediction_error(predict(model, dataset), dataset.ttfs)
