"""Acceptance suite: one test per criterion, at the stated tolerances.

The simulation-study tests (sim1, stragglers, timing) run the full grids and
take tens of minutes on one core; they are marked ``slow``.
"""

import math
import os
import time

import numpy as np
import pytest

from conftest import lowrank_datasets
from fedprog import lls
from fedprog.baseline import central_mfpca
from fedprog.cmapss import cmapss_files
from fedprog.datagen import generate_study, preset
from fedprog.experiments import SuiteConfig, median, run_suite
from fedprog.federation import Federation, FederationPlan, modeled_comm_time, wire
from fedprog.federation.transport import FROM_PARTICIPANT
from fedprog.subspace import TrackerOptions, principal_angles, track_subspace

LEVELS = (0.3, 0.5, 0.7)
PUBLISHED_MEDIAN = {0.3: 0.013, 0.5: 0.017, 0.7: 0.026}


# 1 -------------------------------------------------------------------------------


def test_c01_federated_scores_equal_pooled_fpca():
    t0 = time.perf_counter()
    parts, X, _ = lowrank_datasets(N=60, sizes=(12, 10, 8), K=3, seed=0)
    assert X.shape == (60, 30)
    with Federation(parts, FederationPlan(max_sweeps=1000)) as fed:
        run = fed.run_subspace(4)
        bundle = fed.run_scores(run.basis)
    ref = central_mfpca(X, 3)
    Z = bundle.scores[:3]
    # per-component sign alignment
    Z = Z * np.sign(np.sum(Z * ref.scores, axis=1))[:, None]
    assert run.converged
    assert np.max(np.abs(Z - ref.scores)) <= 1e-6 * np.linalg.norm(ref.scores)
    assert time.perf_counter() - t0 < 5.0


# 2 -------------------------------------------------------------------------------


def test_c02_tracker_recovers_exact_subspace():
    t0 = time.perf_counter()
    parts, X, B = lowrank_datasets(N=50, sizes=(20,), K=3, offset=0.0, seed=0)
    res = track_subspace(parts[0].signals, 3, seed=0, opts=TrackerOptions(max_sweeps=100))
    assert res.converged and res.errors[-1] < 1e-6 and res.sweeps <= 100
    assert principal_angles(res.basis.U, B).max() < 1e-6

    parts, X, B = lowrank_datasets(N=50, sizes=(20,), K=3, missing=0.3, offset=0.0, seed=0)
    assert min(s.observed.size for s in parts[0].signals) >= 2 * 3
    res = track_subspace(parts[0].signals, 3, seed=0)
    assert principal_angles(res.basis.U, B).max() < 1e-3
    assert time.perf_counter() - t0 < 10.0


# 3 -------------------------------------------------------------------------------


def test_c03_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    h = 1e-6
    K, n = 2, 25
    for tag, fam in sorted(lls.FAMILIES.items()):
        for _ in range(50):
            z = rng.standard_normal((K, n))
            y = 1.0 + 0.4 * z[0] - 0.3 * z[1] + 0.3 * rng.standard_normal(n)
            theta = np.concatenate([[1.0, 0.4, -0.3] + 0.5 * rng.standard_normal(3),
                                    [math.log(0.3) + 0.5 * rng.standard_normal()]])
            m = lls.LLSModel.from_params(fam, theta)
            g = lls.local_loglik_grad(m, z, fam.untransform(y))
            grad = np.concatenate([[g.grad_beta0], g.grad_beta, [g.grad_log_sigma]])

            def loglik(t):
                return lls.local_loglik_grad(lls.LLSModel.from_params(fam, t), z, fam.untransform(y)).local_loglik

            fd = np.array([(loglik(theta + h * e) - loglik(theta - h * e)) / (2 * h) for e in np.eye(K + 2)])
            rel = np.max(np.abs(grad - fd)) / np.max(np.abs(fd))
            assert rel <= 1e-5, (tag, theta, rel)
    assert time.perf_counter() - t0 < 5.0


# 4 -------------------------------------------------------------------------------


def test_c04_federated_fit_equals_pooled_fit():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    z = rng.standard_normal((3, 60))
    y = 2.0 + 0.5 * z[0] - 0.25 * z[1] + 0.1 * z[2] + 0.2 * rng.standard_normal(60)
    splits = (slice(0, 30), slice(30, 45), slice(45, 60))
    for tag, fam in sorted(lls.FAMILIES.items()):
        t = fam.untransform(y)
        clients = [lls.LocalLLSClient(f"user{i}", z[:, s], t[s], tag) for i, s in enumerate(splits, 1)]
        fed = lls.federated_fit(clients, tag)
        pooled = lls.fit_pooled(z, t, tag)
        assert np.max(np.abs(fed.params - pooled.params)) <= 1e-6, tag
    A = np.vstack([np.ones(60), z]).T
    coef = np.linalg.lstsq(A, y, rcond=None)[0]
    sigma = math.sqrt(np.mean((y - A @ coef) ** 2))
    fed = lls.federated_fit([lls.LocalLLSClient(f"user{i}", z[:, s], y[s], "normal")
                             for i, s in enumerate(splits, 1)], "normal")
    assert np.max(np.abs(fed.params[:-1] - coef)) <= 1e-6
    assert abs(fed.sigma - sigma) <= 1e-6
    assert time.perf_counter() - t0 < 5.0


# 5 and 6 share one run of the Simulation I grid -----------------------------------


@pytest.fixture(scope="module")
def sim1_reports(tmp_path_factory):
    reports, failures = run_suite("sim1", SuiteConfig(), tmp_path_factory.mktemp("sim1"))
    assert not failures, failures
    return reports


def _pick(reports, mode, level, label=None):
    return [r for r in reports if r.mode == mode and r.missing == level and (label is None or r.label == label)]


@pytest.mark.slow
def test_c05a_federated_equals_nonfederated_predictions(sim1_reports):
    nf = [r for r in sim1_reports if r.mode == "non-federated"]
    assert len(nf) == 45
    fed = {(r.missing, r.permutation): r.K for r in sim1_reports if r.mode == "federated"}
    for r in nf:
        assert r.K == fed[(r.missing, r.permutation)]
        assert r.extra["agreement"] <= 1e-6, (r.missing, r.permutation, r.extra["agreement"])


@pytest.mark.slow
@pytest.mark.parametrize("level", LEVELS)
def test_c05b_federated_median_near_published(sim1_reports, level):
    errs = np.concatenate([r.errors for r in _pick(sim1_reports, "federated", level)])
    assert errs.size == 15 * 30
    m = median(errs)
    assert 0.5 * PUBLISHED_MEDIAN[level] <= m <= 2.0 * PUBLISHED_MEDIAN[level], m


@pytest.mark.slow
@pytest.mark.parametrize("level", LEVELS)
def test_c06a_federated_beats_every_individual_model(sim1_reports, level):
    fed = {r.permutation: r.median for r in _pick(sim1_reports, "federated", level)}
    wins = 0
    for p, m in fed.items():
        ind = [r.median for r in _pick(sim1_reports, "individual", level) if r.permutation == p]
        assert len(ind) == 3
        wins += all(m <= v for v in ind)
    assert wins >= 13, wins


@pytest.mark.slow
@pytest.mark.parametrize("level", LEVELS)
def test_c06b_individual_error_falls_with_training_size(sim1_reports, level):
    med = {u: median(np.concatenate([r.errors for r in _pick(sim1_reports, "individual", level, u)]))
           for u in ("user1", "user2", "user3")}
    assert med["user1"] <= med["user2"] <= med["user3"], med


# 7 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_c07_stragglers_barely_move_the_median(tmp_path):
    cfg = SuiteConfig(iterations=(800,), repeats=10)
    reports, failures = run_suite("stragglers", cfg, tmp_path)
    assert not failures, failures
    for level in LEVELS:
        rs = [r for r in reports if r.missing == level]
        assert len(rs) == 20
        assert all(r.extra["visited"] == 800 * (4 if r.extra["policy"] == "drop-one" else 5) for r in rs)
        full = median(np.concatenate([r.errors for r in rs if r.extra["policy"] == "none"]))
        strag = median(np.concatenate([r.errors for r in rs if r.extra["policy"] == "drop-one"]))
        assert abs(strag - full) / full <= 0.2, (level, full, strag)


# 8 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_c08_timing_shape(tmp_path):
    # 300 users x 20 samples is the largest full decomposition that fits in memory here
    cfg = SuiteConfig(users=(50, 100, 150, 300))
    reports, failures = run_suite("timing", cfg, tmp_path)
    assert not failures, failures
    t = {r.extra["users"]: r.timing for r in reports}
    growth = 300 / 50
    assert t[300]["fed_compute"] / t[50]["fed_compute"] < growth
    assert t[300]["nonfed_compute"] / t[50]["nonfed_compute"] > growth
    assert t[300]["nonfed_compute"] / t[300]["fed_compute"] >= 10
    for r in reports:
        I = r.extra["users"]
        n = int(r.timing["sweeps"])
        assert abs(r.timing["modeled_comm"] - I * n * r.timing["tau"]) <= 1e-12


def test_c08_comm_time_arithmetic():
    plan = FederationPlan(tau_comm=0.002)
    for I, n in ((1000, 510), (5, 7), (300, 3), (1, 1)):
        assert abs(modeled_comm_time(plan, n, I) - I * n * 0.002) <= 1e-12
    drop = FederationPlan(tau_comm=0.002, straggler_policy="drop-one")
    assert abs(modeled_comm_time(drop, 800, 5) - 4 * 800 * 0.002) <= 1e-12
    # 1000 users: modeled communication plus roughly 25 s of compute lands at the published total
    assert abs(modeled_comm_time(plan, 510, 1000) + 25.0 - 1046.0) <= 1.0


# 9 -------------------------------------------------------------------------------


def _cmapss_dir():
    for d in (os.environ.get("FEDPROG_CMAPSS_DIR"), os.path.join(os.path.dirname(__file__), "..", "data", "CMAPSS")):
        if d and all(os.path.exists(p) for p in cmapss_files(d).values()):
            return d
    return None


@pytest.mark.slow
def test_c09_cmapss_case_study(tmp_path):
    d = _cmapss_dir()
    if d is None:
        pytest.skip("C-MAPSS FD001 files not found: set FEDPROG_CMAPSS_DIR to a directory holding "
                    "train_FD001.txt, test_FD001.txt and RUL_FD001.txt")
    cfg = SuiteConfig(levels=(0.3,), permutations=1, family="weibull", cmapss_dir=d, individual=False)
    reports, failures = run_suite("cmapss", cfg, tmp_path)
    assert not failures, failures
    fed = next(r for r in reports if r.mode == "federated")
    nf = next(r for r in reports if r.mode == "non-federated")
    assert nf.extra["agreement"] <= 1e-6
    assert 0.05 <= fed.median <= 0.13, fed.median


# 10 ------------------------------------------------------------------------------


def test_c10_no_raw_signals_cross_the_wire():
    st = generate_study(preset("sim1", seed=10))
    plan = FederationPlan(transport="socket", record=True)
    with Federation(st.participants, plan) as fed:
        run = fed.run_subspace(4)
        bundle = fed.run_scores(run.basis)
        fed.fit_lls(3, "lognormal")
        corpus = list(fed.transport.corpus)
    assert bundle.scores.shape[1] == 90 and len(corpus) > 100

    allowed = {wire.MessageType.BASIS_HANDOFF, wire.MessageType.RESIDUAL_REPORT, wire.MessageType.WEIGHT_BLOCK,
               wire.MessageType.SCORE_BUNDLE, wire.MessageType.PARAM_BROADCAST, wire.MessageType.GRADIENT_PACKET,
               wire.MessageType.MOMENT_REPORT, wire.MessageType.CONTROL}
    upstream = {wire.MessageType.BASIS_HANDOFF, wire.MessageType.RESIDUAL_REPORT, wire.MessageType.WEIGHT_BLOCK,
                wire.MessageType.GRADIENT_PACKET, wire.MessageType.MOMENT_REPORT}
    for direction, pid, buf in corpus:
        mtype, _ = wire.split_frame(buf)
        assert mtype in allowed, mtype
        msg = wire.decode(buf)
        if direction == FROM_PARTICIPANT:
            assert mtype in upstream or (isinstance(msg, wire.Control) and msg.op == wire.ControlOp.HELLO), mtype

    # no 8-byte window anywhere in the traffic equals an observed signal value
    secret = np.unique(np.concatenate([s.observed_values for d in st.participants for s in d.signals]))
    secret_bits = secret.view("<u8")
    blob = b"".join(buf for _, _, buf in corpus)
    for off in range(8):
        n = (len(blob) - off) // 8
        words = np.frombuffer(blob, dtype="<u8", count=n, offset=off)
        assert not np.isin(words, secret_bits).any(), off

    # nor does any run of four observed indices, as 32- or 64-bit integers
    for d in st.participants:
        for s in d.signals:
            for dt in ("<i4", "<i8"):
                assert s.observed[:4].astype(dt).tobytes() not in blob
