"""Binary framing and message codecs.

A frame is ``length (u32, big-endian) | type (u8) | payload`` where the
length counts the type byte and the payload. Payload numbers are
little-endian; basis matrices and score bundles reuse their checkpoint
encodings. Every message a participant or the server can emit has a type
below, and decoding consumes the payload exactly, so a recorded corpus can be
audited frame by frame.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from ..lls import GradientPacket, MomentReport
from ..scores import ScoreBundle, WeightBlock
from ..subspace import SubspaceBasis

_LEN = struct.Struct(">I")
MAX_FRAME = 1 << 31


class WireError(ValueError):
    pass


class MessageType(enum.IntEnum):
    BASIS_HANDOFF = 0x01
    RESIDUAL_REPORT = 0x02
    WEIGHT_BLOCK = 0x03
    SCORE_BUNDLE = 0x04
    PARAM_BROADCAST = 0x05
    GRADIENT_PACKET = 0x06
    MOMENT_REPORT = 0x07
    ERROR_REPORT = 0x08
    CONTROL = 0x09


class HandoffMode(enum.IntEnum):
    UPDATE = 0   # apply local signals, pass the basis on
    FINAL = 1    # keep this basis and answer with weights


class ParamKind(enum.IntEnum):
    EVALUATE = 0
    MOMENTS = 1
    FINAL = 2


class ControlOp(enum.IntEnum):
    HELLO = 0
    INIT = 1
    SHUTDOWN = 2


def frame(mtype: int, payload: bytes) -> bytes:
    return _LEN.pack(len(payload) + 1) + bytes([int(mtype)]) + payload


def split_frame(buf: bytes) -> tuple[MessageType, bytes]:
    if len(buf) < 5:
        raise WireError("frame shorter than its header")
    (n,) = _LEN.unpack_from(buf)
    if n != len(buf) - 4:
        raise WireError(f"frame length field {n} disagrees with {len(buf) - 4} bytes")
    try:
        return MessageType(buf[4]), buf[5:]
    except ValueError:
        raise WireError(f"unknown message type 0x{buf[4]:02x}") from None


def read_frame(read_exact) -> bytes:
    """Read one frame using ``read_exact(n) -> bytes``."""
    head = read_exact(4)
    (n,) = _LEN.unpack(head)
    if not 1 <= n <= MAX_FRAME:
        raise WireError(f"bad frame length {n}")
    return head + read_exact(n)


# -- small helpers ----------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        s = struct.Struct("<" + fmt)
        if self.pos + s.size > len(self.buf):
            raise WireError("truncated payload")
        out = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return out if len(out) > 1 else out[0]

    def f64(self, n: int) -> np.ndarray:
        if self.pos + 8 * n > len(self.buf):
            raise WireError("truncated payload")
        a = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += 8 * n
        return a

    def text(self) -> str:
        n = self.take("H")
        if self.pos + n > len(self.buf):
            raise WireError("truncated payload")
        s = self.buf[self.pos: self.pos + n].decode("utf-8")
        self.pos += n
        return s

    def rest(self) -> bytes:
        out = self.buf[self.pos:]
        self.pos = len(self.buf)
        return out

    def done(self):
        if self.pos != len(self.buf):
            raise WireError(f"{len(self.buf) - self.pos} unread payload bytes")


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise WireError("identifier too long")
    return struct.pack("<H", len(raw)) + raw


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


# -- messages ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BasisHandoff:
    mode: HandoffMode
    sweep: int
    running_e: float
    basis: SubspaceBasis

    def encode(self) -> bytes:
        head = struct.pack("<BIQd", int(self.mode), self.sweep, self.basis.updates, self.running_e)
        return frame(MessageType.BASIS_HANDOFF, head + self.basis.to_bytes())

    @classmethod
    def decode(cls, payload: bytes) -> "BasisHandoff":
        r = _Reader(payload)
        mode, sweep, updates, e = r.take("BIQd")
        return cls(HandoffMode(mode), sweep, e, SubspaceBasis.from_bytes(r.rest(), updates))


@dataclass(frozen=True)
class ResidualReport:
    participant_id: str
    sweep: int
    contribution: float
    n_signals: int
    compute_seconds: float

    def encode(self) -> bytes:
        body = _text(self.participant_id) + struct.pack("<IdId", self.sweep, self.contribution,
                                                        self.n_signals, self.compute_seconds)
        return frame(MessageType.RESIDUAL_REPORT, body)

    @classmethod
    def decode(cls, payload: bytes) -> "ResidualReport":
        r = _Reader(payload)
        pid = r.text()
        sweep, contrib, n, secs = r.take("IdId")
        r.done()
        return cls(pid, sweep, contrib, n, secs)


def encode_weight_block(b: WeightBlock) -> bytes:
    K, J = b.W.shape
    return frame(MessageType.WEIGHT_BLOCK, _text(b.participant_id) + struct.pack("<II", K, J) + _f64(b.W))


def decode_weight_block(payload: bytes) -> WeightBlock:
    r = _Reader(payload)
    pid = r.text()
    K, J = r.take("II")
    W = r.f64(K * J).reshape(K, J)
    r.done()
    return WeightBlock(pid, W)


def encode_score_bundle(b: ScoreBundle) -> bytes:
    return frame(MessageType.SCORE_BUNDLE, b.to_bytes())


def decode_score_bundle(payload: bytes) -> ScoreBundle:
    return ScoreBundle.from_bytes(payload)


@dataclass(frozen=True, eq=False)
class ParamBroadcast:
    kind: ParamKind
    family: str
    K: int
    theta: np.ndarray

    def encode(self) -> bytes:
        theta = np.asarray(self.theta, dtype=np.float64)
        body = struct.pack("<BI", int(self.kind), self.K) + _text(self.family) + struct.pack("<I", theta.size) + _f64(theta)
        return frame(MessageType.PARAM_BROADCAST, body)

    @classmethod
    def decode(cls, payload: bytes) -> "ParamBroadcast":
        r = _Reader(payload)
        kind, K = r.take("BI")
        fam = r.text()
        n = r.take("I")
        theta = r.f64(n)
        r.done()
        return cls(ParamKind(kind), fam, K, theta)


def _encode_partials(pid: str, n: int, partials) -> bytes:
    parts = [_text(pid), struct.pack("<II", n, len(partials))]
    for p in partials:
        parts.append(struct.pack("<I", len(p)) + _f64(np.asarray(p, dtype=np.float64)))
    return b"".join(parts)


def _decode_partials(payload: bytes):
    r = _Reader(payload)
    pid = r.text()
    n, ncomp = r.take("II")
    partials = []
    for _ in range(ncomp):
        m = r.take("I")
        partials.append(tuple(r.f64(m).tolist()))
    r.done()
    return pid, n, tuple(partials)


def encode_gradient(p: GradientPacket) -> bytes:
    return frame(MessageType.GRADIENT_PACKET, _encode_partials(p.participant_id, p.local_n, p.partials))


def decode_gradient(payload: bytes) -> GradientPacket:
    pid, n, partials = _decode_partials(payload)
    return GradientPacket.from_partials(pid, n, partials)


def encode_moments(m: MomentReport) -> bytes:
    return frame(MessageType.MOMENT_REPORT, _encode_partials(m.participant_id, m.local_n, m.partials))


def decode_moments(payload: bytes) -> MomentReport:
    pid, n, partials = _decode_partials(payload)
    return MomentReport(pid, n, partials)


@dataclass(frozen=True)
class ErrorReport:
    participant_id: str
    message: str

    def encode(self) -> bytes:
        return frame(MessageType.ERROR_REPORT, _text(self.participant_id) + _text(self.message[:60000]))

    @classmethod
    def decode(cls, payload: bytes) -> "ErrorReport":
        r = _Reader(payload)
        pid, msg = r.text(), r.text()
        r.done()
        return cls(pid, msg)


@dataclass(frozen=True)
class Control:
    op: ControlOp
    participant_id: str = ""
    K: int = 0
    seed: int = 0

    def encode(self) -> bytes:
        return frame(MessageType.CONTROL, struct.pack("<BIQ", int(self.op), self.K, self.seed) + _text(self.participant_id))

    @classmethod
    def decode(cls, payload: bytes) -> "Control":
        r = _Reader(payload)
        op, K, seed = r.take("BIQ")
        pid = r.text()
        r.done()
        return cls(ControlOp(op), pid, K, seed)


_DECODERS = {
    MessageType.BASIS_HANDOFF: BasisHandoff.decode,
    MessageType.RESIDUAL_REPORT: ResidualReport.decode,
    MessageType.WEIGHT_BLOCK: decode_weight_block,
    MessageType.SCORE_BUNDLE: decode_score_bundle,
    MessageType.PARAM_BROADCAST: ParamBroadcast.decode,
    MessageType.GRADIENT_PACKET: decode_gradient,
    MessageType.MOMENT_REPORT: decode_moments,
    MessageType.ERROR_REPORT: ErrorReport.decode,
    MessageType.CONTROL: Control.decode,
}


def decode(buf: bytes):
    """Decode one frame into its message object."""
    mtype, payload = split_frame(buf)
    return _DECODERS[mtype](payload)


def encode(msg) -> bytes:
    if isinstance(msg, WeightBlock):
        return encode_weight_block(msg)
    if isinstance(msg, ScoreBundle):
        return encode_score_bundle(msg)
    if isinstance(msg, GradientPacket):
        return encode_gradient(msg)
    if isinstance(msg, MomentReport):
        return encode_moments(msg)
    return msg.encode()
