"""Participants, the coordinating server, and the three federated procedures.

* subspace tracking: a token ring in which the basis visits every
  participant once per sweep (the server relays the token and tallies the
  residual reports);
* scores: a single star round where participants send weight vectors and
  receive their own scores back;
* regression: repeated star rounds of parameter broadcast and gradient
  collection.

Raw signals never leave a :class:`Participant`; the server only ever sees the
message types of :mod:`fedprog.federation.wire`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import lls
from ..scores import ScoreBundle, local_weights, server_scores
from ..signals import LocalDataset
from ..subspace import SignalPack, SubspaceBasis, TrackerOptions, init_subspace, sweep
from . import wire
from .transport import Transport, make_transport


class Participant:
    """One data owner. Answers framed requests from the server."""

    def __init__(self, dataset: LocalDataset, tracker: TrackerOptions = TrackerOptions()):
        self.dataset = dataset
        self.participant_id = dataset.participant_id
        self.tracker = tracker
        self.pack = SignalPack.from_signals(dataset.signals, dataset.grid.N)
        self.basis: SubspaceBasis | None = None
        self.bundle: ScoreBundle | None = None
        self.model: lls.LLSModel | None = None
        self._client = None

    def handle(self, buf: bytes) -> list[bytes]:
        try:
            return self._dispatch(wire.decode(buf))
        except Exception as exc:  # reported to the server instead of killing the worker
            return [wire.ErrorReport(self.participant_id, f"{type(exc).__name__}: {exc}").encode()]

    def _dispatch(self, msg) -> list[bytes]:
        if isinstance(msg, wire.Control):
            if msg.op == wire.ControlOp.INIT:
                basis = init_subspace(self.dataset.grid.N, msg.K, msg.seed)
                return [wire.BasisHandoff(wire.HandoffMode.UPDATE, 0, 0.0, basis).encode()]
            raise ValueError(f"unexpected control op {msg.op!r}")
        if isinstance(msg, wire.BasisHandoff):
            if msg.mode == wire.HandoffMode.FINAL:
                self.basis = msg.basis
                return [wire.encode(local_weights(msg.basis, self.dataset, self.tracker.rcond))]
            basis = msg.basis
            t0 = time.perf_counter()
            res = sweep(basis, self.pack, self.tracker)
            e = res.contribution(msg.running_e)
            secs = time.perf_counter() - t0
            report = wire.ResidualReport(self.participant_id, msg.sweep, res.contribution(), len(self.pack), secs)
            return [report.encode(), wire.BasisHandoff(wire.HandoffMode.UPDATE, msg.sweep, e, basis).encode()]
        if isinstance(msg, ScoreBundle):
            self.bundle = msg
            self._client = None
            return []
        if isinstance(msg, wire.ParamBroadcast):
            if msg.kind == wire.ParamKind.FINAL:
                self.model = lls.LLSModel.from_params(msg.family, msg.theta)
                return []
            client = self._lls_client(msg.family, msg.K)
            if msg.kind == wire.ParamKind.MOMENTS:
                return [wire.encode(client.moments())]
            return [wire.encode(client.evaluate(msg.theta))]
        raise ValueError(f"unexpected message {type(msg).__name__}")

    def _lls_client(self, family, K):
        if self._client is None or self._client.family.tag != family or self._client.z.shape[0] != K:
            if self.bundle is None:
                raise RuntimeError("no scores received yet")
            z = self.bundle.block(self.participant_id)[:K]
            self._client = lls.LocalLLSClient(self.participant_id, z, self.dataset.ttfs, family)
        return self._client


STRAGGLER_POLICIES = ("none", "drop-one")


@dataclass(frozen=True, eq=False)
class FederationPlan:
    """How a federated run is organized.

    Parameters
    ----------
    ring_order : sequence of str, optional
        Visiting order of the token ring; roster order when omitted.
    straggler_policy : {"none", "drop-one"} or array of bool
        ``drop-one`` removes one uniformly chosen participant from every
        sweep. A boolean array of shape ``(max_sweeps, I)`` (ring order)
        marks stragglers explicitly.
    tau_comm : float
        Modeled seconds per basis hand-off.
    """

    ring_order: tuple | None = None
    max_sweeps: int = 100
    conv_eps: float = 1e-6
    straggler_policy: object = "none"
    tau_comm: float = 0.0
    seed: int = 0
    transport: str = "inproc"
    record: bool = False
    tracker: TrackerOptions | None = None

    def __post_init__(self):
        if isinstance(self.straggler_policy, str):
            if self.straggler_policy not in STRAGGLER_POLICIES:
                raise ValueError(f"unknown straggler policy {self.straggler_policy!r}")
        else:
            object.__setattr__(self, "straggler_policy", np.asarray(self.straggler_policy, dtype=bool))
        if self.tau_comm < 0:
            raise ValueError("tau_comm must be >= 0")
        if self.tracker is None:
            object.__setattr__(self, "tracker", TrackerOptions(self.max_sweeps, self.conv_eps))

    def straggler_mask(self, I: int) -> np.ndarray:
        """``(max_sweeps, I)`` boolean array, True where a participant sits out."""
        pol = self.straggler_policy
        if isinstance(pol, np.ndarray):
            if pol.shape != (self.max_sweeps, I):
                raise ValueError(f"straggler mask must have shape {(self.max_sweeps, I)}, got {pol.shape}")
            return pol
        mask = np.zeros((self.max_sweeps, I), dtype=bool)
        if pol == "drop-one":
            if I < 2:
                raise ValueError("drop-one stragglers need at least two participants")
            pick = np.random.default_rng([self.seed, 7]).integers(0, I, size=self.max_sweeps)
            mask[np.arange(self.max_sweeps), pick] = True
        return mask


@dataclass
class RoundLog:
    sweep: int
    visited: list
    contributions: dict
    e: float
    local_time: float
    comm_time: float
    skipped: bool = False


@dataclass
class SubspaceRun:
    basis: SubspaceBasis
    logs: list
    converged: bool

    @property
    def sweeps(self) -> int:
        return len(self.logs)

    @property
    def errors(self) -> list:
        return [l.e for l in self.logs if not l.skipped]


def modeled_comm_time(plan: FederationPlan, sweeps_executed, n_participants: int | None = None) -> float:
    """Modeled communication seconds: visited participants per sweep times ``tau``, summed.

    ``sweeps_executed`` is either a sweep count (with ``n_participants``) or a
    list of :class:`RoundLog`.
    """
    if not isinstance(sweeps_executed, (int, np.integer)):
        return float(sum(len(l.visited) for l in sweeps_executed)) * plan.tau_comm
    if n_participants is None:
        raise ValueError("n_participants is required with a sweep count")
    n = int(sweeps_executed)
    if isinstance(plan.straggler_policy, np.ndarray):
        visits = int((~plan.straggler_mask(n_participants)[:n]).sum())
    elif plan.straggler_policy == "drop-one":
        visits = (n_participants - 1) * n
    else:
        visits = n_participants * n
    return visits * plan.tau_comm


class _RemoteLLSClient:
    def __init__(self, fed: "Federation", pid: str, K: int, family: str):
        self.fed, self.participant_id, self.K, self.family = fed, pid, K, family

    def _ask(self, kind, theta):
        buf = wire.ParamBroadcast(kind, self.family, self.K, np.asarray(theta, dtype=np.float64)).encode()
        (reply,) = self.fed.transport.request(self.participant_id, buf, 1)
        return wire.decode(reply)

    def moments(self):
        return self._ask(wire.ParamKind.MOMENTS, np.zeros(0))

    def evaluate(self, theta):
        return self._ask(wire.ParamKind.EVALUATE, theta)


class Federation:
    """Server side of one federation: owns the transport and drives the rounds."""

    def __init__(self, datasets: Sequence[LocalDataset], plan: FederationPlan = FederationPlan()):
        datasets = list(datasets)
        if not datasets:
            raise ValueError("a federation needs at least one participant")
        ids = [d.participant_id for d in datasets]
        if len(set(ids)) != len(ids):
            raise ValueError("participant ids must be unique")
        grids = {d.grid for d in datasets}
        if len(grids) != 1:
            raise ValueError("participants must share one grid")
        self.plan = plan
        self.roster = ids
        self.counts = {d.participant_id: len(d) for d in datasets}
        self.N = datasets[0].grid.N
        ring = list(plan.ring_order) if plan.ring_order is not None else ids
        if sorted(ring) != sorted(ids):
            raise ValueError("ring order must be a permutation of the participant ids")
        self.ring = ring
        parts = {d.participant_id: Participant(d, plan.tracker) for d in datasets}
        self.transport: Transport = make_transport(plan.transport, parts, record=plan.record)
        self.server_time = 0.0

    def close(self):
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def run_subspace(self, K_sub: int, seed: int | None = None) -> SubspaceRun:
        if not any(self.counts.values()):
            raise ValueError("no participant holds a signal")
        seed = self.plan.seed if seed is None else seed
        tr = self.transport
        (buf,) = tr.request(self.ring[0], wire.Control(wire.ControlOp.INIT, K=K_sub, seed=seed).encode(), 1)
        basis = wire.decode(buf).basis
        mask = self.plan.straggler_mask(len(self.ring))
        logs, converged = [], False
        for s in range(self.plan.max_sweeps):
            visited = [pid for pid, out in zip(self.ring, mask[s]) if not out]
            if not visited:
                logs.append(RoundLog(s + 1, [], {}, float("nan"), 0.0, 0.0, skipped=True))
                continue
            e, contrib, local = 0.0, {}, 0.0
            for pid in visited:
                rep, hand = tr.request(pid, wire.BasisHandoff(wire.HandoffMode.UPDATE, s + 1, e, basis).encode(), 2)
                rep = wire.decode(rep)
                hand = wire.decode(hand)
                basis, e = hand.basis, hand.running_e
                contrib[pid] = rep.contribution
                local += rep.compute_seconds
            logs.append(RoundLog(s + 1, visited, contrib, e, local, len(visited) * self.plan.tau_comm))
            if e < self.plan.conv_eps:
                converged = True
                break
        return SubspaceRun(basis, logs, converged)

    def run_scores(self, basis: SubspaceBasis) -> ScoreBundle:
        req = {pid: wire.BasisHandoff(wire.HandoffMode.FINAL, 0, 0.0, basis).encode() for pid in self.roster}
        replies = self.transport.broadcast(req, 1)
        blocks = [wire.decode(replies[pid][0]) for pid in self.roster]
        t0 = time.perf_counter()
        bundle = server_scores(blocks, basis)
        self.server_time += time.perf_counter() - t0
        for pid in self.roster:
            self.transport.send(pid, wire.encode(bundle.for_participant(pid)))
        return bundle

    def fit_lls(self, K: int, family, opts: lls.FitOptions = lls.FitOptions(),
                trace: lls.FitTrace | None = None) -> lls.LLSModel:
        fam = lls.get_family(family)
        clients = [_RemoteLLSClient(self, pid, K, fam.tag) for pid in self.roster]
        t0 = time.perf_counter()
        model = lls.federated_fit(clients, fam, opts, trace)
        self.server_time += time.perf_counter() - t0
        for pid in self.roster:
            self.transport.send(pid, wire.ParamBroadcast(wire.ParamKind.FINAL, fam.tag, K, model.params).encode())
        return model


def run_subspace_protocol(datasets, plan: FederationPlan, K_sub: int) -> tuple[SubspaceBasis, list]:
    with Federation(datasets, plan) as fed:
        run = fed.run_subspace(K_sub)
    return run.basis, run.logs


def run_scores_protocol(datasets, plan: FederationPlan, basis: SubspaceBasis) -> ScoreBundle:
    with Federation(datasets, plan) as fed:
        return fed.run_scores(basis)
