"""Point-to-point transports used by the collectives.

Two implementations share the ``send(dst, tag, seq, payload)`` /
``recv(src) -> (tag, seq, payload)`` interface:

* ``SimFabric`` runs every rank in one process.  Each rank gets a thread, but
  only one thread holds the baton at a time; a rank runs until it blocks on an
  empty inbound edge, then the baton passes to the next runnable rank in
  ascending order.  Scheduling is therefore a pure function of the program.
* ``TcpEndpoint`` is one OS process per rank over a full mesh of sockets.

Frames on the wire are little-endian::

    u32 tag | u32 sequence | u64 element count | payload

Bit 8 of the tag selects the payload type: clear for raw fp16 bit patterns,
set for fp32.  The low byte is the collective primitive code.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from collections import deque
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FRAME_HEADER = struct.Struct("<IIQ")
HELLO = struct.Struct("<I")
TAG_FP32 = 0x100


class ProtocolError(RuntimeError):
    """Ranks disagreed about the collective being executed, or a peer vanished."""


def payload_tag(primitive_code: int, payload: np.ndarray) -> int:
    if payload.dtype == np.uint16:
        return primitive_code
    if payload.dtype == np.float32:
        return primitive_code | TAG_FP32
    raise TypeError(f"unsupported payload dtype {payload.dtype}")


def encode_frame(tag: int, seq: int, payload: np.ndarray) -> bytes:
    wire = payload.astype("<f4" if tag & TAG_FP32 else "<u2", copy=False)
    return FRAME_HEADER.pack(tag, seq, payload.shape[0]) + wire.tobytes()


def decode_payload(tag: int, count: int, body: bytes) -> np.ndarray:
    if tag & TAG_FP32:
        return np.frombuffer(body, dtype="<f4", count=count).astype(np.float32)
    return np.frombuffer(body, dtype="<u2", count=count).astype(np.uint16)


def payload_nbytes(tag: int, count: int) -> int:
    return count * (4 if tag & TAG_FP32 else 2)


# ---------------------------------------------------------------------------
# deterministic in-process fabric


class _Abort(Exception):
    pass


class SimFabric:
    def __init__(self, n_ranks: int):
        if n_ranks < 1:
            raise ValueError("need at least one rank")
        self.n_ranks = n_ranks
        self._cv = threading.Condition()
        self._queues = {
            (s, d): deque() for s in range(n_ranks) for d in range(n_ranks) if s != d
        }
        self._turn: int | None = None
        self._waiting: dict[int, int] = {}
        self._finished: set[int] = set()
        self._aborted = False
        self.messages = 0

    def endpoint(self, rank: int) -> "SimEndpoint":
        return SimEndpoint(self, rank)

    # all helpers below are called with self._cv held
    def _runnable(self, rank: int) -> bool:
        if rank in self._finished:
            return False
        src = self._waiting.get(rank)
        return src is None or bool(self._queues[(src, rank)])

    def _pass_baton(self, current: int) -> None:
        for k in range(1, self.n_ranks + 1):
            cand = (current + k) % self.n_ranks
            if self._runnable(cand):
                self._turn = cand
                self._cv.notify_all()
                return
        self._turn = None
        if len(self._finished) < self.n_ranks:
            self._aborted = True
        self._cv.notify_all()

    def _wait_turn(self, rank: int) -> None:
        while self._turn != rank and not self._aborted:
            self._cv.wait()
        if self._aborted and self._turn != rank:
            raise _Abort()

    def _send(self, src: int, dst: int, item) -> None:
        with self._cv:
            self._queues[(src, dst)].append(item)
            self.messages += 1

    def _recv(self, rank: int, src: int):
        with self._cv:
            q = self._queues[(src, rank)]
            if not q:
                self._waiting[rank] = src
                self._pass_baton(rank)
                self._wait_turn(rank)
                self._waiting.pop(rank, None)
            return q.popleft()

    def run(self, programs: Sequence[Callable[[], object]]) -> list:
        """Run one program per rank to completion; returns results in rank order.

        If a rank raises, that exception is re-raised here after every rank
        has stopped.  Ranks left waiting on a message that can never arrive
        fail with ``ProtocolError``.
        """
        if len(programs) != self.n_ranks:
            raise ValueError(f"expected {self.n_ranks} programs, got {len(programs)}")
        results: list = [None] * self.n_ranks
        errors: list = [None] * self.n_ranks
        self._finished.clear()
        self._waiting.clear()
        self._aborted = False

        def body(rank: int) -> None:
            with self._cv:
                try:
                    self._wait_turn(rank)
                except _Abort:
                    errors[rank] = ProtocolError(f"rank {rank} never scheduled")
                    self._finished.add(rank)
                    return
            try:
                results[rank] = programs[rank]()
            except _Abort:
                errors[rank] = ProtocolError(
                    f"rank {rank} deadlocked waiting for rank {self._waiting.get(rank)}"
                )
            except BaseException as exc:  # surfaced to the caller below
                errors[rank] = exc
            with self._cv:
                self._finished.add(rank)
                self._waiting.pop(rank, None)
                self._pass_baton(rank)

        threads = [
            threading.Thread(target=body, args=(r,), name=f"sim-rank-{r}", daemon=True)
            for r in range(self.n_ranks)
        ]
        for t in threads:
            t.start()
        with self._cv:
            self._turn = 0
            self._cv.notify_all()
        for t in threads:
            t.join()

        primary = [e for e in errors if e is not None and not isinstance(e, ProtocolError)]
        if primary:
            raise primary[0]
        derived = [e for e in errors if e is not None]
        if derived:
            raise derived[0]
        leftovers = sum(len(q) for q in self._queues.values())
        if leftovers:
            raise ProtocolError(f"{leftovers} undelivered messages after all ranks finished")
        return results


class SimEndpoint:
    def __init__(self, fabric: SimFabric, rank: int):
        self.fabric = fabric
        self.rank = rank
        self.n_ranks = fabric.n_ranks

    def send(self, dst: int, tag: int, seq: int, payload: np.ndarray) -> None:
        self.fabric._send(self.rank, dst, (tag, seq, np.array(payload, copy=True)))

    def recv(self, src: int):
        return self.fabric._recv(self.rank, src)

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# sockets


def parse_roster(text: str) -> list[tuple[str, int]]:
    """Roster file: one ``host:port`` per line in rank order; '#' comments."""
    roster = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        host, _, port = line.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad roster entry {line!r}, expected host:port")
        roster.append((host, int(port)))
    if not roster:
        raise ValueError("roster is empty")
    return roster


def free_loopback_roster(n_ranks: int) -> list[tuple[str, int]]:
    socks = []
    try:
        for _ in range(n_ranks):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind(("127.0.0.1", 0))
            socks.append(s)
        return [("127.0.0.1", s.getsockname()[1]) for s in socks]
    finally:
        for s in socks:
            s.close()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf.extend(chunk)
    return bytes(buf)


class TcpEndpoint:
    """Full-mesh socket endpoint.  Rank ``r`` accepts from higher ranks and
    dials lower ranks; a reader thread per peer drains frames into a FIFO so
    sends never wait on the receiver's progress."""

    def __init__(self, rank: int, roster: Sequence[tuple[str, int]], timeout: float = 60.0):
        self.rank = rank
        self.n_ranks = len(roster)
        self.timeout = timeout
        self._socks: dict[int, socket.socket] = {}
        self._locks: dict[int, threading.Lock] = {}
        self._inbox: dict[int, queue.Queue] = {p: queue.Queue() for p in range(self.n_ranks)}
        self._readers: list[threading.Thread] = []
        self._closing = False
        self._connect(roster)

    def _connect(self, roster) -> None:
        host, port = roster[self.rank]
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(self.n_ranks)
        listener.settimeout(self.timeout)
        try:
            for peer in range(self.rank):
                self._socks[peer] = self._dial(roster[peer], peer)
            for _ in range(self.rank + 1, self.n_ranks):
                conn, _addr = listener.accept()
                conn.settimeout(None)
                (peer,) = HELLO.unpack(_recv_exact(conn, HELLO.size))
                if not (self.rank < peer < self.n_ranks) or peer in self._socks:
                    raise ProtocolError(f"rank {self.rank}: unexpected hello from rank {peer}")
                self._socks[peer] = conn
        except socket.timeout as exc:
            raise ProtocolError(f"rank {self.rank}: rendezvous timed out") from exc
        finally:
            listener.close()
        for peer, sock in self._socks.items():
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._locks[peer] = threading.Lock()
            t = threading.Thread(target=self._reader, args=(peer, sock), daemon=True)
            t.start()
            self._readers.append(t)

    def _dial(self, addr, peer: int) -> socket.socket:
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                sock = socket.create_connection(addr, timeout=self.timeout)
                sock.settimeout(None)
                sock.sendall(HELLO.pack(self.rank))
                return sock
            except OSError:
                if time.monotonic() > deadline:
                    raise ProtocolError(f"rank {self.rank}: cannot reach rank {peer} at {addr}")
                time.sleep(0.05)

    def _reader(self, peer: int, sock: socket.socket) -> None:
        inbox = self._inbox[peer]
        try:
            while True:
                tag, seq, count = FRAME_HEADER.unpack(_recv_exact(sock, FRAME_HEADER.size))
                body = _recv_exact(sock, payload_nbytes(tag, count))
                inbox.put((tag, seq, decode_payload(tag, count, body)))
        except (ConnectionError, OSError) as exc:
            if not self._closing:
                log.debug("rank %d: link to %d closed: %s", self.rank, peer, exc)
            inbox.put(None)

    def send(self, dst: int, tag: int, seq: int, payload: np.ndarray) -> None:
        frame = encode_frame(tag, seq, payload)
        try:
            with self._locks[dst]:
                self._socks[dst].sendall(frame)
        except OSError as exc:
            raise ProtocolError(f"rank {self.rank}: send to rank {dst} failed: {exc}") from exc

    def recv(self, src: int):
        try:
            item = self._inbox[src].get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError(f"rank {self.rank}: timed out waiting for rank {src}") from None
        if item is None:
            raise ProtocolError(f"rank {self.rank}: rank {src} disconnected")
        return item

    def close(self) -> None:
        self._closing = True
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
