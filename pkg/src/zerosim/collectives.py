"""Collective primitives with exact per-rank volume accounting.

Every reduction sums contributions in ascending rank order, widening fp16
inputs to fp32 before each addition.  To keep that order *and* fp16 on the
wire at optimal volume, the reduce-scatter uses a pairwise schedule: each
rank sends every non-owned chunk straight to its owner, which folds the
contributions in rank order.  Each rank still sends ``len * (N-1)/N``
elements, the same as a ring.  All-gather and broadcast are ring pipelines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import f16_to_f32
from .transport import ProtocolError, payload_tag

PRIMITIVES = ("reduce_scatter", "all_gather", "broadcast", "point_reduce")
_CODES = {name: i + 1 for i, name in enumerate(PRIMITIVES)}


@dataclass
class PrimitiveCounts:
    elements_sent: int = 0
    elements_received: int = 0
    messages: int = 0
    bytes_sent: int = 0


@dataclass
class CommStats:
    counts: dict[str, PrimitiveCounts] = field(
        default_factory=lambda: {p: PrimitiveCounts() for p in PRIMITIVES}
    )

    @property
    def elements_sent(self) -> int:
        return sum(c.elements_sent for c in self.counts.values())

    @property
    def elements_received(self) -> int:
        return sum(c.elements_received for c in self.counts.values())

    def snapshot(self) -> "CommStats":
        return CommStats({k: PrimitiveCounts(**vars(v)) for k, v in self.counts.items()})

    def __sub__(self, other: "CommStats") -> "CommStats":
        out = {}
        for k, v in self.counts.items():
            o = other.counts[k]
            out[k] = PrimitiveCounts(
                v.elements_sent - o.elements_sent,
                v.elements_received - o.elements_received,
                v.messages - o.messages,
                v.bytes_sent - o.bytes_sent,
            )
        return CommStats(out)


class ProcessGroup:
    """One rank's view of the data-parallel group."""

    def __init__(self, endpoint, rank: int | None = None, n_ranks: int | None = None):
        self.endpoint = endpoint
        self.rank = endpoint.rank if rank is None else rank
        self.n_ranks = endpoint.n_ranks if n_ranks is None else n_ranks
        if not 0 <= self.rank < self.n_ranks:
            raise ValueError(f"rank {self.rank} outside group of {self.n_ranks}")
        self.stats = CommStats()
        self._seq = 0

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def send(self, primitive: str, seq: int, dst: int, payload: np.ndarray) -> None:
        tag = payload_tag(_CODES[primitive], payload)
        self.endpoint.send(dst, tag, seq, payload)
        c = self.stats.counts[primitive]
        c.elements_sent += payload.shape[0]
        c.bytes_sent += payload.nbytes
        c.messages += 1

    def recv(self, primitive: str, seq: int, src: int, expect_len: int | None = None) -> np.ndarray:
        tag, got_seq, payload = self.endpoint.recv(src)
        if (tag & 0xFF) != _CODES[primitive] or got_seq != seq:
            raise ProtocolError(
                f"rank {self.rank}: expected {primitive} #{seq} from rank {src}, "
                f"got tag {tag:#x} #{got_seq}"
            )
        if expect_len is not None and payload.shape[0] != expect_len:
            raise ProtocolError(
                f"rank {self.rank}: {primitive} from rank {src} carried {payload.shape[0]} "
                f"elements, expected {expect_len}"
            )
        self.stats.counts[primitive].elements_received += payload.shape[0]
        return payload


def _widen(x: np.ndarray) -> np.ndarray:
    return f16_to_f32(x) if x.dtype == np.uint16 else np.asarray(x, dtype=np.float32)


def _accumulate_ascending(parts) -> np.ndarray:
    acc = None
    for part in parts:
        w = _widen(part)
        acc = w.copy() if acc is None else acc + w
    return acc


def _check_flat(local: np.ndarray) -> np.ndarray:
    arr = np.asarray(local)
    if arr.ndim != 1:
        raise ValueError("collectives operate on flat 1-D tensors")
    if arr.dtype not in (np.uint16, np.float32):
        arr = arr.astype(np.float32)
    return arr


def _reduce_pieces(group: ProcessGroup, primitive: str, local: np.ndarray, pieces):
    """Reduce each ``(owner, start, end)`` piece of ``local`` onto its owner.

    Returns this rank's owned results in the order given.
    """
    owned = []
    for owner, start, end in pieces:
        seq = group.next_seq()
        if owner != group.rank:
            group.send(primitive, seq, owner, local[start:end])
            continue
        parts = []
        for src in range(group.n_ranks):
            if src == group.rank:
                parts.append(local[start:end])
            else:
                parts.append(group.recv(primitive, seq, src, end - start))
        owned.append(_accumulate_ascending(parts))
    return owned


def reduce_scatter(group: ProcessGroup, local: np.ndarray) -> np.ndarray:
    """Rank ``r`` gets chunk ``r`` of the element-wise sum over ranks (fp32)."""
    local = _check_flat(local)
    n = group.n_ranks
    if local.shape[0] % n:
        raise ValueError(f"length {local.shape[0]} not divisible by {n} ranks; pad first")
    if n == 1:
        return _widen(local).copy()
    c = local.shape[0] // n
    # every rank walks owners in the same order; owner r's turn is a fan-in
    pieces = [(owner, owner * c, (owner + 1) * c) for owner in range(n)]
    (result,) = _reduce_pieces(group, "reduce_scatter", local, pieces)
    return result


def ring_all_gather(group: ProcessGroup, owned: np.ndarray) -> np.ndarray:
    """Concatenate every rank's ``owned`` chunk in rank order on all ranks."""
    owned = _check_flat(owned)
    n, r = group.n_ranks, group.rank
    c = owned.shape[0]
    out = np.empty(n * c, dtype=owned.dtype)
    out[r * c : (r + 1) * c] = owned
    if n == 1:
        return out
    nxt, prv = (r + 1) % n, (r - 1) % n
    for step in range(n - 1):
        seq = group.next_seq()
        send_block = (r - step) % n
        recv_block = (r - step - 1) % n
        group.send("all_gather", seq, nxt, out[send_block * c : (send_block + 1) * c])
        out[recv_block * c : (recv_block + 1) * c] = group.recv("all_gather", seq, prv, c)
    return out


def all_reduce(group: ProcessGroup, local: np.ndarray) -> np.ndarray:
    return ring_all_gather(group, reduce_scatter(group, local))


def ring_broadcast(
    group: ProcessGroup, root: int, chunk: np.ndarray | None = None, length: int | None = None
) -> np.ndarray:
    """Pipeline ``chunk`` from ``root`` around the ring; every rank returns it.

    Non-root ranks may pass ``length`` to have the received size checked.
    """
    n, r = group.n_ranks, group.rank
    if not 0 <= root < n:
        raise ValueError(f"broadcast root {root} outside group of {n}")
    seq = group.next_seq()
    if r == root:
        if chunk is None:
            raise ValueError("root must supply the chunk")
        data = _check_flat(chunk)
    else:
        data = group.recv("broadcast", seq, (r - 1) % n, length)
    if n > 1 and (r + 1) % n != root:
        group.send("broadcast", seq, (r + 1) % n, data)
    return np.array(data, copy=True)


class Bucket:
    """Constant-size staging window for gradient reduction.

    Tracks the elements currently staged and the high-water mark.
    """

    def __init__(self, capacity_elements: int):
        if capacity_elements < 1:
            raise ValueError(f"bucket capacity must be >= 1, got {capacity_elements}")
        self.capacity_elements = int(capacity_elements)
        self.staged: list[tuple[int, int]] = []
        self.peak_staged = 0
        self.rounds = 0

    @property
    def staged_elements(self) -> int:
        return sum(e - s for s, e in self.staged)

    def stage(self, start: int, end: int) -> None:
        if self.staged_elements + (end - start) > self.capacity_elements:
            raise OverflowError(
                f"staging [{start}, {end}) exceeds bucket capacity {self.capacity_elements}"
            )
        self.staged.append((start, end))
        self.peak_staged = max(self.peak_staged, self.staged_elements)

    def flush(self) -> None:
        self.staged.clear()
        self.rounds += 1

    def plan(self, ranges) -> list[tuple[int, int, int]]:
        """Split each owner ``(start, end)`` range into capacity-sized pieces."""
        pieces = []
        for owner, (start, end) in enumerate(ranges):
            for s in range(start, end, self.capacity_elements):
                pieces.append((owner, s, min(s + self.capacity_elements, end)))
        return pieces


def bucketed_reduce_to_owner(group: ProcessGroup, grads_f16: np.ndarray, layout, bucket: Bucket) -> np.ndarray:
    """Reduce fp16 gradients onto partition owners one bucket at a time.

    Returns this rank's fp32 sums for its owned range.  The caller may drop
    every non-owned gradient element afterwards.
    """
    grads = _check_flat(grads_f16)
    if grads.shape[0] != layout.padded:
        raise ValueError(f"gradient length {grads.shape[0]} != padded length {layout.padded}")
    start, end = layout.ranges[group.rank]
    out = np.empty(end - start, dtype=np.float32)
    for owner, s, e in bucket.plan(layout.ranges):
        bucket.stage(s, e)
        if group.n_ranks == 1:
            piece = _widen(grads[s:e]).copy()
        else:
            got = _reduce_pieces(group, "point_reduce", grads, [(owner, s, e)])
            piece = got[0] if got else None
        if piece is not None:
            out[s - start : e - start] = piece
        bucket.flush()
    return out
