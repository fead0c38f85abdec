"""Message transports between the coordinating server and the participants.

Both transports move the same encoded frames. ``inproc`` runs each
participant on its own thread behind a pair of queues; ``socket`` forks one
process per participant, each connected to the server over a loopback TCP
socket. The server side may record every frame it sends or receives.
"""

from __future__ import annotations

import multiprocessing
import queue
import socket
import struct
import threading
from typing import Callable

from . import wire

TO_PARTICIPANT = 0
FROM_PARTICIPANT = 1


class TransportError(RuntimeError):
    pass


class RemoteError(TransportError):
    """A participant answered with an error report."""

    def __init__(self, report: wire.ErrorReport):
        super().__init__(f"participant {report.participant_id!r} failed: {report.message}")
        self.report = report


class Transport:
    """Request/reply channels from the server to each participant.

    Subclasses implement ``_send`` and ``_recv``. A request expects a fixed
    number of reply frames; a participant that fails answers with a single
    error report instead.
    """

    name = "abstract"

    def __init__(self, record: bool = False):
        self.record = record
        self.corpus: list[tuple[int, str, bytes]] = []

    def _log(self, direction, pid, buf):
        if self.record:
            self.corpus.append((direction, pid, buf))

    def send(self, pid: str, buf: bytes) -> None:
        self._log(TO_PARTICIPANT, pid, buf)
        self._send(pid, buf)

    def collect(self, pid: str, n_replies: int) -> list[bytes]:
        out = []
        for _ in range(n_replies):
            buf = self._recv(pid)
            self._log(FROM_PARTICIPANT, pid, buf)
            mtype, payload = wire.split_frame(buf)
            if mtype == wire.MessageType.ERROR_REPORT:
                raise RemoteError(wire.ErrorReport.decode(payload))
            out.append(buf)
        return out

    def request(self, pid: str, buf: bytes, n_replies: int) -> list[bytes]:
        self.send(pid, buf)
        return self.collect(pid, n_replies)

    def broadcast(self, requests: dict, n_replies: int) -> dict:
        """Send every request first, then gather replies in the same order."""
        for pid, buf in requests.items():
            self.send(pid, buf)
        return {pid: self.collect(pid, n_replies) for pid in requests}

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(handler: Callable[[bytes], list], recv: Callable[[], bytes], send: Callable[[bytes], None]) -> None:
    """Participant loop: answer frames until a shutdown control arrives."""
    while True:
        buf = recv()
        if buf is None:
            return
        mtype, payload = wire.split_frame(buf)
        if mtype == wire.MessageType.CONTROL and wire.Control.decode(payload).op == wire.ControlOp.SHUTDOWN:
            return
        for out in handler(buf):
            send(out)


class InprocTransport(Transport):
    name = "inproc"

    def __init__(self, participants: dict, record: bool = False):
        super().__init__(record)
        self._in = {pid: queue.SimpleQueue() for pid in participants}
        self._out = {pid: queue.SimpleQueue() for pid in participants}
        self._threads = []
        for pid, part in participants.items():
            t = threading.Thread(target=serve, args=(part.handle, self._in[pid].get, self._out[pid].put),
                                 name=f"participant-{pid}", daemon=True)
            t.start()
            self._threads.append(t)

    def _send(self, pid, buf):
        self._in[pid].put(buf)

    def _recv(self, pid):
        return self._out[pid].get()

    def close(self):
        for q in self._in.values():
            q.put(wire.Control(wire.ControlOp.SHUTDOWN).encode())
        for t in self._threads:
            t.join(timeout=10)
        self._threads = []


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        c = sock.recv(min(n - got, 1 << 20))
        if not c:
            raise TransportError("connection closed mid-frame")
        chunks.append(c)
        got += len(c)
    return b"".join(chunks)


def _child_main(part, port: int) -> None:
    sock = socket.create_connection(("127.0.0.1", port))
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    try:
        sock.sendall(wire.Control(wire.ControlOp.HELLO, part.participant_id).encode())

        def recv():
            try:
                return wire.read_frame(lambda n: _read_exact(sock, n))
            except TransportError:
                return None

        serve(part.handle, recv, sock.sendall)
    finally:
        sock.close()


class SocketTransport(Transport):
    """One forked process per participant, framed messages over loopback TCP."""

    name = "socket"

    def __init__(self, participants: dict, record: bool = False, timeout: float = 120.0):
        super().__init__(record)
        ctx = multiprocessing.get_context("fork")
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.bind(("127.0.0.1", 0))
        srv.listen(len(participants))
        srv.settimeout(timeout)
        port = srv.getsockname()[1]
        self._procs = []
        self._socks: dict[str, socket.socket] = {}
        try:
            for part in participants.values():
                p = ctx.Process(target=_child_main, args=(part, port), daemon=True)
                p.start()
                self._procs.append(p)
            for _ in participants:
                conn, _ = srv.accept()
                conn.settimeout(timeout)
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                buf = wire.read_frame(lambda n: _read_exact(conn, n))
                self._log(FROM_PARTICIPANT, "?", buf)
                hello = wire.decode(buf)
                if not isinstance(hello, wire.Control) or hello.op != wire.ControlOp.HELLO:
                    raise TransportError("expected a hello frame")
                if hello.participant_id not in participants:
                    raise TransportError(f"unknown participant {hello.participant_id!r}")
                self._socks[hello.participant_id] = conn
        except Exception:
            self.close()
            raise
        finally:
            srv.close()

    def _send(self, pid, buf):
        self._socks[pid].sendall(buf)

    def _recv(self, pid):
        sock = self._socks[pid]
        return wire.read_frame(lambda n: _read_exact(sock, n))

    def close(self):
        bye = wire.Control(wire.ControlOp.SHUTDOWN).encode()
        for s in self._socks.values():
            try:
                s.sendall(bye)
                s.close()
            except OSError:
                pass
        self._socks = {}
        for p in self._procs:
            p.join(timeout=10)
            if p.is_alive():
                p.terminate()
        self._procs = []


TRANSPORTS = {"inproc": InprocTransport, "socket": SocketTransport}


def make_transport(kind: str, participants: dict, record: bool = False) -> Transport:
    try:
        cls = TRANSPORTS[kind]
    except KeyError:
        raise ValueError(f"unknown transport {kind!r}; choose {sorted(TRANSPORTS)}") from None
    return cls(participants, record=record)


# -- corpus files -----------------------------------------------------------------


def write_corpus(path, records) -> None:
    with open(path, "wb") as fh:
        for direction, pid, buf in records:
            raw = pid.encode("utf-8")
            fh.write(struct.pack("<BH", direction, len(raw)) + raw + buf)


def read_corpus(path) -> list[tuple[int, str, bytes]]:
    with open(path, "rb") as fh:
        data = fh.read()
    out, pos = [], 0
    while pos < len(data):
        direction, ln = struct.unpack_from("<BH", data, pos)
        pos += 3
        pid = data[pos: pos + ln].decode("utf-8")
        pos += ln
        (n,) = struct.unpack_from(">I", data, pos)
        out.append((direction, pid, data[pos: pos + 4 + n]))
        pos += 4 + n
    return out
