"""Experiment suites: grids of independent cells, each producing prediction-error reports.

Suites
------
sim1        missing level x permutation; federated, non-federated and each user alone
stragglers  missing level x repeat x sweep budget x {full, drop-one}
scale       the 150-user layout; federated, non-federated and each user alone
timing      user count; compute time of the federated and non-federated routes
cmapss      turbofan case study (needs the FD001 files)
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from ._kernels import BACKEND
from .baseline import central_mfpca, complete_matrix
from .datagen import generate_study, preset
from .federation import Federation, FederationPlan, modeled_comm_time
from .lls import prediction_error
from .pipeline import (Selection, evaluate, fit_federated, predict, train_federated, train_individual,
                       train_nonfederated)

log = logging.getLogger(__name__)

STUDIES = ("sim1", "stragglers", "scale", "timing", "cmapss")
LEVELS = (0.3, 0.5, 0.7)


def iqr(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return float("nan")
    q1, q3 = np.percentile(x, [25, 75])
    return float(q3 - q1)


def median(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.median(x)) if x.size else float("nan")


@dataclass(eq=False)
class ExperimentReport:
    """Errors of one trained model on one test set, with its identifying coordinates."""

    study: str
    mode: str
    missing: float
    permutation: int
    errors: np.ndarray
    label: str = ""
    K: int = -1
    timing: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    median: float = float("nan")
    iqr: float = float("nan")

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64).reshape(-1)
        if math.isnan(self.median) and self.errors.size:
            self.median = median(self.errors)
            self.iqr = iqr(self.errors)

    def verify(self, tol: float = 1e-12) -> None:
        """Recompute median and IQR from the raw errors; raise if the stored values disagree."""
        m, q = median(self.errors), iqr(self.errors)
        for name, a, b in (("median", self.median, m), ("IQR", self.iqr, q)):
            if not (math.isnan(a) and math.isnan(b)) and not abs(a - b) <= tol * max(1.0, abs(b)):
                raise ValueError(f"{self.key()}: stored {name} {a!r} != recomputed {b!r}")

    def key(self) -> str:
        parts = [self.study, self.mode, self.label or "-", f"m{self.missing:g}", f"p{self.permutation}"]
        parts += [f"{k}{v}" for k, v in sorted(self.extra.items()) if k in ("iterations", "policy", "users")]
        return "_".join(str(p) for p in parts)

    def summary_row(self) -> dict:
        row = {"study": self.study, "mode": self.mode, "label": self.label, "missing": self.missing,
               "permutation": self.permutation, "K": self.K, "n": int(self.errors.size),
               "median": repr(self.median), "iqr": repr(self.iqr)}
        for k, v in sorted(self.extra.items()):
            row[f"x_{k}"] = v
        for k, v in sorted(self.timing.items()):
            row[f"t_{k}"] = v
        return row


# -- cells ------------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteConfig:
    levels: tuple = LEVELS
    permutations: int = 15
    seed: int = 0
    family: str = "lognormal"
    max_sweeps: int = 100
    conv_eps: float = 1e-6
    transport: str = "inproc"
    selection: Selection = Selection()
    iterations: tuple = (200, 400, 800)
    repeats: int = 10
    users: tuple = (50, 100, 150, 300, 500, 800, 1000)
    samples_per_user: int = 20
    update_budget: int = 20000
    timing_K: int = 3
    tau_ms: float = 2.0
    individual: bool = True
    cmapss_dir: str | None = None
    workers: int = 1

    def plan(self, **kw) -> FederationPlan:
        base = dict(max_sweeps=self.max_sweeps, conv_eps=self.conv_eps, transport=self.transport,
                    seed=self.seed, tau_comm=self.tau_ms / 1000.0)
        base.update(kw)
        return FederationPlan(**base)


def _agreement(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.abs(b)))


def _mode_reports(study_name, participants, test, level, perm, cfg: SuiteConfig, extra=None) -> list:
    """Federated, non-federated (sharing the federated K) and individual reports for one data draw."""
    extra = dict(extra or {})
    plan = cfg.plan()
    out = []
    fm = train_federated(participants, cfg.family, plan, cfg.selection)
    pf = predict(fm, test)
    timing = {k: v for k, v in fm.timing.items() if isinstance(v, (int, float))}
    out.append(ExperimentReport(study_name, "federated", level, perm, _errors(pf, test), "all", fm.K,
                                timing, extra))
    nf = train_nonfederated(participants, fm.K, fm.K_sub, plan, cfg.family)
    pn = predict(nf, test)
    out.append(ExperimentReport(study_name, "non-federated", level, perm, _errors(pn, test), "all", nf.K,
                                dict(nf.timing), {**extra, "agreement": _agreement(pf, pn)}))
    if cfg.individual:
        for d in participants:
            if len(d) < 2:
                continue
            im = train_individual(d, cfg.family, plan, cfg.selection)
            out.append(ExperimentReport(study_name, "individual", level, perm, evaluate(im, test),
                                        d.participant_id, im.K, {}, {**extra, "J": len(d)}))
    return out


def _errors(pred, test):
    return prediction_error(pred, test.ttfs) if len(test) else np.zeros(0)


def sim1_cell(level: float, perm: int, cfg: SuiteConfig, name: str = "sim1") -> list:
    st = generate_study(preset(name, missing_fraction=level, permutation=perm, seed=cfg.seed))
    return _mode_reports(name, st.participants, st.test, level, perm, cfg)


def select_straggler_k(level: float, cfg: SuiteConfig) -> int:
    """K for the straggler study at one missing level, chosen once by federated CV on repeat 0."""
    st = generate_study(preset("stragglers", missing_fraction=level, permutation=0, seed=cfg.seed))
    fm = train_federated(st.participants, cfg.family, cfg.plan(), cfg.selection)
    return fm.K


def stragglers_cell(level: float, repeat: int, cfg: SuiteConfig, K: int) -> list:
    st = generate_study(preset("stragglers", missing_fraction=level, permutation=repeat, seed=cfg.seed))
    out = []
    for n in cfg.iterations:
        for policy in ("none", "drop-one"):
            plan = cfg.plan(max_sweeps=n, straggler_policy=policy, seed=cfg.seed * 1000 + repeat)
            fm = fit_federated(st.participants, K, K + cfg.selection.head_room, plan, cfg.family)
            timing = {k: v for k, v in fm.timing.items() if isinstance(v, (int, float))}
            out.append(ExperimentReport("stragglers", "federated", level, repeat, evaluate(fm, st.test),
                                        "all", K, timing, {"iterations": n, "policy": policy,
                                                           "visited": sum(len(l.visited) for l in fm.logs)}))
    return out


def timing_cell(users: int, cfg: SuiteConfig) -> list:
    """Decomposition time of both routes at one user count, with a fixed total update budget.

    Federated: participants' ring compute plus the score round. Non-federated:
    single-holder completion of the pooled matrix plus a full dense SVD. The
    regression fit is the same work on both sides and is left out.
    """
    level = cfg.levels[0]
    sim = preset("sim1", user_split=(cfg.samples_per_user,) * users, n_test=0, missing_fraction=level,
                 seed=cfg.seed)
    st = generate_study(sim)
    J = users * cfg.samples_per_user
    sweeps = max(1, cfg.update_budget // J)
    plan = cfg.plan(max_sweeps=sweeps, conv_eps=0.0)
    K = cfg.timing_K
    with Federation(st.participants, plan) as fed:
        run = fed.run_subspace(K + 1)
        t0 = time.perf_counter()
        fed.run_scores(run.basis)
        t_scores = time.perf_counter() - t0
    ring = float(sum(l.local_time for l in run.logs))
    t0 = time.perf_counter()
    comp = complete_matrix(st.participants, K + 1, seed=cfg.seed, opts=plan.tracker)
    t1 = time.perf_counter()
    central_mfpca(comp.matrix, K, full_matrices=True)
    t2 = time.perf_counter()
    timing = {"fed_ring": ring, "fed_scores": t_scores, "fed_compute": ring + t_scores,
              "modeled_comm": modeled_comm_time(plan, run.logs),
              "nonfed_completion": t1 - t0, "nonfed_svd": t2 - t1, "nonfed_compute": t2 - t0,
              "sweeps": run.sweeps, "tau": plan.tau_comm}
    return [ExperimentReport("timing", "federated", level, 0, np.zeros(0), "all", K, timing,
                             {"users": users, "J": J})]


def cmapss_cell(level: float, perm: int, cfg: SuiteConfig) -> list:
    from .cmapss import load_case_study
    if not cfg.cmapss_dir:
        raise FileNotFoundError("C-MAPSS directory not configured (--cmapss-dir)")
    parts, test = load_case_study(cfg.cmapss_dir, missing_fraction=level, seed=cfg.seed + perm)
    return _mode_reports("cmapss", parts, test, level, perm, cfg)


def suite_cells(study: str, cfg: SuiteConfig) -> list[tuple]:
    """``(cell_id, function, args)`` for every cell of a suite."""
    if study in ("sim1", "scale"):
        return [(f"{study}_m{lv:g}_p{p}", sim1_cell, (lv, p, cfg, study))
                for lv in cfg.levels for p in range(cfg.permutations)]
    if study == "stragglers":
        return [(f"stragglers_m{lv:g}_r{r}", stragglers_cell, (lv, r, cfg)) for lv in cfg.levels
                for r in range(cfg.repeats)]
    if study == "timing":
        return [(f"timing_u{u}", timing_cell, (u, cfg)) for u in cfg.users]
    if study == "cmapss":
        return [(f"cmapss_m{lv:g}_p{p}", cmapss_cell, (lv, p, cfg)) for lv in cfg.levels
                for p in range(cfg.permutations)]
    raise ValueError(f"unknown study {study!r}; choose from {STUDIES}")


def _run_cell(fn, args):
    try:
        return fn(*args), None
    except Exception:
        return None, traceback.format_exc()


def run_suite(study: str, cfg: SuiteConfig, out_dir=None, emit_gnuplot: bool = False):
    """Run every cell, write reports, and return ``(reports, failures)``."""
    cells = suite_cells(study, cfg)
    if study == "stragglers":
        ks = {}
        for lv in cfg.levels:
            ks[lv] = select_straggler_k(lv, cfg)
            log.info("stragglers: missing %g uses K=%d", lv, ks[lv])
        cells = [(cid, fn, args + (ks[args[0]],)) for cid, fn, args in cells]
    reports, failures = [], {}
    t0 = time.perf_counter()
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futs = [(cid, pool.submit(_run_cell, fn, args)) for cid, fn, args in cells]
            results = [(cid, f.result()) for cid, f in futs]
    else:
        results = [(cid, _run_cell(fn, args)) for cid, fn, args in cells]
    for cid, (reps, err) in results:
        if err is not None:
            log.error("cell %s failed:\n%s", cid, err)
            failures[cid] = err
        else:
            reports.extend(reps)
    if out_dir is not None:
        write_suite(out_dir, study, cfg, reports, failures, time.perf_counter() - t0, emit_gnuplot)
    return reports, failures


# -- output -----------------------------------------------------------------------


def aggregate(reports) -> list[dict]:
    """One row per (mode, label, missing, iterations, policy, users) group."""
    groups: dict = {}
    for r in reports:
        key = (r.mode, r.label, r.missing, r.extra.get("iterations", ""), r.extra.get("policy", ""),
               r.extra.get("users", ""))
        groups.setdefault(key, []).append(r)
    rows = []
    for key, rs in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        pooled = np.concatenate([r.errors for r in rs])
        meds = [r.median for r in rs if not math.isnan(r.median)]
        row = {"mode": key[0], "label": key[1], "missing": key[2], "iterations": key[3], "policy": key[4],
               "users": key[5], "cells": len(rs), "median_of_medians": median(meds),
               "pooled_median": median(pooled), "pooled_iqr": iqr(pooled)}
        for tk in sorted({k for r in rs for k in r.timing}):
            vals = [r.timing[tk] for r in rs if tk in r.timing]
            row[f"t_{tk}"] = float(np.mean(vals))
        rows.append(row)
    return rows


def _write_csv(path, rows):
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def write_suite(out_dir, study, cfg, reports, failures, elapsed, emit_gnuplot=False) -> None:
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(os.path.join(out_dir, "summary.csv"), [r.summary_row() for r in reports])
    with open(os.path.join(out_dir, "errors.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["report", "index", "error"])
        for i, r in enumerate(reports):
            for j, e in enumerate(r.errors.tolist()):
                w.writerow([i, j, repr(e)])
    agg = aggregate(reports)
    _write_csv(os.path.join(out_dir, "aggregate.csv"), agg)
    cfg_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items() if k != "selection"}
    cfg_dict["selection"] = dict(cfg.selection.__dict__)
    manifest = {"study": study, "version": __version__, "backend": BACKEND, "config": cfg_dict,
                "reports": len(reports), "failed_cells": sorted(failures), "elapsed_seconds": elapsed,
                "files": ["summary.csv", "errors.csv", "aggregate.csv"]}
    if emit_gnuplot:
        gdir = os.path.join(out_dir, "gnuplot")
        os.makedirs(gdir, exist_ok=True)
        for row, rs in _groups_for_plot(reports):
            name = "_".join(str(x) for x in row if x != "") or "all"
            with open(os.path.join(gdir, f"{name}.dat"), "w") as fh:
                fh.write("# permutation median iqr\n")
                for r in rs:
                    fh.write(f"{r.permutation} {r.median!r} {r.iqr!r}\n")
        manifest["files"].append("gnuplot/")
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)


def _groups_for_plot(reports):
    groups: dict = {}
    for r in reports:
        key = (r.mode, r.label, f"m{r.missing:g}", r.extra.get("iterations", ""), r.extra.get("policy", ""))
        groups.setdefault(key, []).append(r)
    return sorted(groups.items())


def read_reports(out_dir) -> list[ExperimentReport]:
    """Load ``summary.csv`` and ``errors.csv``; every report's median and IQR are re-checked."""
    errs: dict = {}
    with open(os.path.join(out_dir, "errors.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            errs.setdefault(int(row["report"]), []).append(float(row["error"]))
    out = []
    with open(os.path.join(out_dir, "summary.csv"), newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            extra = {k[2:]: v for k, v in row.items() if k.startswith("x_") and v != ""}
            timing = {k[2:]: float(v) for k, v in row.items() if k.startswith("t_") and v not in ("", "True", "False")}
            r = ExperimentReport(row["study"], row["mode"], float(row["missing"]), int(row["permutation"]),
                                 np.array(errs.get(i, [])), row["label"], int(row["K"]), timing, extra,
                                 float(row["median"]), float(row["iqr"]))
            r.verify()
            out.append(r)
    return out
