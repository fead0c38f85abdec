"""Federated orchestration: wire format, transports and protocols."""

from .protocol import (Federation, FederationPlan, Participant, RoundLog, SubspaceRun,
                       modeled_comm_time, run_scores_protocol, run_subspace_protocol)
from .transport import InprocTransport, SocketTransport, make_transport

__all__ = [
    "Federation", "FederationPlan", "Participant", "RoundLog", "SubspaceRun",
    "modeled_comm_time", "run_scores_protocol", "run_subspace_protocol",
    "InprocTransport", "SocketTransport", "make_transport",
]
