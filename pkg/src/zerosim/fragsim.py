"""Free-list heap simulator for interleaved short- and long-lived allocations.

Two placement policies are modelled:

``interleaved``
    Every request goes to one first-fit (or best-fit) free list over the
    whole heap, so long-lived blocks end up wedged between short-lived ones.
``md_defrag``
    Long-lived requests are bump-allocated from a region reserved at the
    bottom of the heap, sized by a pre-scan of the trace to the peak of live
    long-lived bytes.  Freeing a long-lived block compacts the region by
    copying the blocks above it down, so it never holds holes.  Short-lived
    requests use a first-fit free list over the rest of the heap.

Trace files hold one event per line::

    alloc <id> <size> <short|long>
    free <id>

Blank lines and ``#`` comments are ignored; a ``# capacity=<bytes>`` comment
supplies a default heap size.
"""

from __future__ import annotations

import bisect
import csv
import io
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

POLICIES = ("interleaved", "md_defrag")
FITS = ("first", "best")
SHORT, LONG = "short", "long"


class TraceError(ValueError):
    """Malformed trace: bad syntax, double free, unknown or reused id."""


@dataclass(frozen=True)
class AllocEvent:
    kind: str  # "alloc" or "free"
    id: str
    size: int = 0
    lifetime: str = SHORT

    def __post_init__(self):
        if self.kind not in ("alloc", "free"):
            raise TraceError(f"unknown event kind {self.kind!r}")
        if self.kind == "alloc":
            if self.size <= 0:
                raise TraceError(f"alloc {self.id}: size must be positive, got {self.size}")
            if self.lifetime not in (SHORT, LONG):
                raise TraceError(f"alloc {self.id}: lifetime must be short or long")

    def line(self) -> str:
        if self.kind == "alloc":
            return f"alloc {self.id} {self.size} {self.lifetime}"
        return f"free {self.id}"


def alloc(id: str, size: int, lifetime: str = SHORT) -> AllocEvent:
    return AllocEvent("alloc", id, size, lifetime)


def free(id: str) -> AllocEvent:
    return AllocEvent("free", id)


# ---------------------------------------------------------------------------
# free list


class FreeList:
    """Sorted, coalesced holes over ``[base, base + size)``."""

    def __init__(self, base: int, size: int, fit: str = "first", from_top: bool = False):
        if fit not in FITS:
            raise ValueError(f"fit must be one of {FITS}, got {fit!r}")
        self.base, self.size, self.fit, self.from_top = base, size, fit, from_top
        self.starts: list[int] = [base] if size > 0 else []
        self.lens: list[int] = [size] if size > 0 else []
        self.holes_examined = 0

    @property
    def free_bytes(self) -> int:
        return sum(self.lens)

    @property
    def largest(self) -> int:
        return max(self.lens, default=0)

    def holes(self) -> list[tuple[int, int]]:
        return list(zip(self.starts, self.lens))

    def alloc(self, size: int) -> int | None:
        pick = None
        order = range(len(self.lens) - 1, -1, -1) if self.from_top else range(len(self.lens))
        for i in order:
            n = self.lens[i]
            self.holes_examined += 1
            if n >= size:
                if self.fit == "first":
                    pick = i
                    break
                if pick is None or n < self.lens[pick]:
                    pick = i
        if pick is None:
            return None
        if self.from_top:
            off = self.starts[pick] + self.lens[pick] - size
            if self.lens[pick] == size:
                del self.starts[pick], self.lens[pick]
            else:
                self.lens[pick] -= size
            return off
        off = self.starts[pick]
        if self.lens[pick] == size:
            del self.starts[pick], self.lens[pick]
        else:
            self.starts[pick] += size
            self.lens[pick] -= size
        return off

    def release(self, off: int, size: int) -> None:
        i = bisect.bisect_left(self.starts, off)
        if i > 0 and self.starts[i - 1] + self.lens[i - 1] > off:
            raise AssertionError(f"double release at {off}")
        if i < len(self.starts) and off + size > self.starts[i]:
            raise AssertionError(f"release of {off}+{size} overlaps a hole")
        merge_prev = i > 0 and self.starts[i - 1] + self.lens[i - 1] == off
        merge_next = i < len(self.starts) and off + size == self.starts[i]
        if merge_prev and merge_next:
            self.lens[i - 1] += size + self.lens[i]
            del self.starts[i], self.lens[i]
        elif merge_prev:
            self.lens[i - 1] += size
        elif merge_next:
            self.starts[i] = off
            self.lens[i] += size
        else:
            self.starts.insert(i, off)
            self.lens.insert(i, size)


def _merged_blocks(blocks: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for s, n in sorted(b for b in blocks if b[1] > 0):
        if out and out[-1][0] + out[-1][1] == s:
            out[-1][1] += n
        else:
            out.append([s, n])
    return [tuple(b) for b in out]


# ---------------------------------------------------------------------------
# heaps


class HeapModel:
    """Heap of ``capacity`` bytes under one placement policy."""

    def __init__(self, capacity: int, policy: str = "interleaved", fit: str = "first", reserved: int = 0):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        if policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self.reserved = min(reserved, capacity) if policy == "md_defrag" else 0
        # md_defrag places shorts from the top so the free space between the
        # two regions stays one block
        self.shorts = FreeList(self.reserved, capacity - self.reserved, fit, from_top=policy == "md_defrag")
        self.live: dict[str, tuple[int, int, str]] = {}  # id -> (offset, size, lifetime)
        self.long_order: list[str] = []  # md_defrag: packed bottom-up
        self.long_top = 0
        self.bytes_moved = 0

    @property
    def allocated(self) -> int:
        return sum(s for _, s, _ in self.live.values())

    @property
    def free_bytes(self) -> int:
        return self.shorts.free_bytes + (self.reserved - self.long_top)

    @property
    def holes_examined(self) -> int:
        return self.shorts.holes_examined

    def free_blocks(self) -> list[tuple[int, int]]:
        """Physically contiguous free ranges, merged across region borders."""
        blocks = self.shorts.holes()
        if self.reserved > self.long_top:
            blocks.append((self.long_top, self.reserved - self.long_top))
        return _merged_blocks(blocks)

    def max_contiguous(self) -> int:
        return max((n for _, n in self.free_blocks()), default=0)

    def alloc(self, id: str, size: int, lifetime: str) -> bool:
        if self.policy == "md_defrag" and lifetime == LONG:
            self.shorts.holes_examined += 1
            if self.long_top + size > self.reserved:
                return False
            off = self.long_top
            self.long_top += size
            self.long_order.append(id)
        else:
            off = self.shorts.alloc(size)
            if off is None:
                return False
        self.live[id] = (off, size, lifetime)
        return True

    def free(self, id: str) -> None:
        off, size, lifetime = self.live.pop(id)
        if self.policy == "md_defrag" and lifetime == LONG:
            i = self.long_order.index(id)
            # slide everything above the freed block down to keep the region packed
            for above in self.long_order[i + 1 :]:
                a_off, a_size, a_life = self.live[above]
                self.live[above] = (a_off - size, a_size, a_life)
                self.bytes_moved += a_size
            del self.long_order[i]
            self.long_top -= size
        else:
            self.shorts.release(off, size)


@dataclass
class FragReport:
    policy: str
    capacity: int
    events: int = 0
    peak_allocated: int = 0
    oom: bool = False
    failing_request: int | None = None
    failing_id: str | None = None
    failing_event: int | None = None
    free_at_failure: int | None = None
    max_contiguous_at_failure: int | None = None
    holes_examined: int = 0
    bytes_moved: int = 0
    reserved: int = 0
    final_free: int = 0
    final_max_contiguous: int = 0
    contiguity: list[int] = field(default_factory=list, repr=False)

    def contiguous_after(self, n_events: int) -> int:
        """Largest free block once the first ``n_events`` events have run."""
        if n_events == 0:
            return self.capacity
        return self.contiguity[n_events - 1]

    @property
    def completed(self) -> int:
        return len(self.contiguity)

    @property
    def free_fraction_at_failure(self) -> float | None:
        if self.free_at_failure is None or not self.capacity:
            return None
        return self.free_at_failure / self.capacity


def validate_trace(trace: Sequence[AllocEvent]) -> None:
    live: dict[str, AllocEvent] = {}
    for n, ev in enumerate(trace):
        if ev.kind == "alloc":
            if ev.id in live:
                raise TraceError(f"event {n}: id {ev.id!r} allocated twice without a free")
            live[ev.id] = ev
        else:
            if ev.id not in live:
                raise TraceError(f"event {n}: free of unknown or already-freed id {ev.id!r}")
            del live[ev.id]


def peak_live_bytes(trace: Sequence[AllocEvent], lifetime: str | None = None) -> int:
    """Peak of live bytes over the trace, optionally for one lifetime class."""
    validate_trace(trace)
    sizes: dict[str, AllocEvent] = {}
    cur = peak = 0
    for ev in trace:
        if ev.kind == "alloc":
            sizes[ev.id] = ev
            if lifetime is None or ev.lifetime == lifetime:
                cur += ev.size
                peak = max(peak, cur)
        else:
            a = sizes.pop(ev.id)
            if lifetime is None or a.lifetime == lifetime:
                cur -= a.size
    return peak


def simulate(heap: HeapModel | int, trace: Sequence[AllocEvent], policy: str = "interleaved", fit: str = "first") -> FragReport:
    """Replay ``trace`` until it ends or an allocation cannot be placed.

    ``heap`` may be a ready ``HeapModel`` or a capacity, in which case a heap
    for ``policy`` is built; md_defrag heaps get their reserved region from
    a pre-scan of the trace.
    """
    trace = list(trace)
    validate_trace(trace)
    if isinstance(heap, int):
        reserved = peak_live_bytes(trace, LONG) if policy == "md_defrag" else 0
        heap = HeapModel(heap, policy, fit, reserved)
    rep = FragReport(heap.policy, heap.capacity, reserved=heap.reserved)
    for n, ev in enumerate(trace):
        rep.events = n + 1
        if ev.kind == "alloc":
            if not heap.alloc(ev.id, ev.size, ev.lifetime):
                rep.oom = True
                rep.failing_request = ev.size
                rep.failing_id = ev.id
                rep.failing_event = n
                rep.free_at_failure = heap.free_bytes
                rep.max_contiguous_at_failure = heap.max_contiguous()
                break
            rep.peak_allocated = max(rep.peak_allocated, heap.allocated)
        else:
            heap.free(ev.id)
        assert heap.allocated + heap.free_bytes == heap.capacity
        rep.contiguity.append(heap.max_contiguous())
    rep.holes_examined = heap.holes_examined
    rep.bytes_moved = heap.bytes_moved
    rep.final_free = heap.free_bytes
    rep.final_max_contiguous = heap.max_contiguous()
    return rep


# ---------------------------------------------------------------------------
# traces


def gen_training_trace(layers: int, ckpt_size: int, temp_size: int, grads_size: int) -> list[AllocEvent]:
    """Allocation pattern of one checkpointed training step.

    Forward: each layer allocates its long-lived checkpoint, then a
    short-lived activation that stays alive until the next layer has
    produced its own.  Backward (reverse layer order): a short-lived
    activation gradient, then the long-lived parameter gradient, then the
    previous layer's activation gradient is released.  Checkpoints stay
    alive for the whole step.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if min(ckpt_size, temp_size, grads_size) <= 0:
        raise ValueError("sizes must be positive")
    ev: list[AllocEvent] = []
    for i in range(layers):
        ev.append(alloc(f"ckpt{i}", ckpt_size, LONG))
        ev.append(alloc(f"act{i}", temp_size, SHORT))
        if i:
            ev.append(free(f"act{i - 1}"))
    ev.append(free(f"act{layers - 1}"))
    for i in reversed(range(layers)):
        ev.append(alloc(f"dact{i}", temp_size, SHORT))
        ev.append(alloc(f"grad{i}", grads_size, LONG))
        if i < layers - 1:
            ev.append(free(f"dact{i + 1}"))
    ev.append(free("dact0"))
    return ev


def random_training_trace(rng: random.Random, max_layers: int = 24, max_size: int = 64) -> list[AllocEvent]:
    return gen_training_trace(
        rng.randint(1, max_layers),
        rng.randint(1, max_size),
        rng.randint(1, max_size),
        rng.randint(1, max_size),
    )


def md_capacity_needed(trace: Sequence[AllocEvent]) -> int:
    """Heap size at which md_defrag is guaranteed to replay a generated trace.

    Within one phase every short request of a generated trace has the same
    size, so the top-down short region never fragments and the two peaks
    simply add.
    """
    return peak_live_bytes(trace, LONG) + peak_live_bytes(trace, SHORT)


@dataclass(frozen=True)
class Dominance:
    at_event: int
    interleaved: int
    md_defrag: int
    md_oom: bool

    @property
    def holds(self) -> bool:
        return self.md_defrag >= self.interleaved and not self.md_oom


def compare_policies(trace: Sequence[AllocEvent], capacity: int, fit: str = "first") -> tuple[FragReport, FragReport, Dominance]:
    """Run both policies and compare largest free blocks where interleaved stopped.

    The comparison point is the state after the events interleaved managed to
    complete: just before its failing request, or the end of the trace.
    """
    a = simulate(capacity, trace, "interleaved", fit)
    b = simulate(capacity, trace, "md_defrag", fit)
    n = a.completed
    md_value = b.contiguous_after(min(n, b.completed))
    return a, b, Dominance(n, a.contiguous_after(n), md_value, b.oom and b.completed < n)


def parse_trace(text: str) -> tuple[list[AllocEvent], int | None]:
    """Parse trace text; returns events and the ``# capacity=`` header, if any."""
    events = []
    capacity = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        body, _, comment = raw.partition("#")
        comment = comment.strip()
        if comment.startswith("capacity="):
            try:
                capacity = int(comment.split("=", 1)[1])
            except ValueError:
                raise TraceError(f"line {lineno}: bad capacity header {comment!r}") from None
        parts = body.split()
        if not parts:
            continue
        try:
            if parts[0] == "alloc" and len(parts) == 4:
                events.append(AllocEvent("alloc", parts[1], int(parts[2]), parts[3]))
            elif parts[0] == "free" and len(parts) == 2:
                events.append(AllocEvent("free", parts[1]))
            else:
                raise TraceError(f"expected 'alloc <id> <size> <short|long>' or 'free <id>', got {body.strip()!r}")
        except (TraceError, ValueError) as exc:
            raise TraceError(f"line {lineno}: {exc}") from None
    validate_trace(events)
    return events, capacity


def format_trace(events: Sequence[AllocEvent], capacity: int | None = None) -> str:
    head = [] if capacity is None else [f"# capacity={capacity}"]
    return "\n".join(head + [e.line() for e in events]) + "\n"


def fixture_path() -> str:
    from importlib import resources

    return str(resources.files("zerosim") / "data" / "training_step.trace")


def load_fixture() -> tuple[list[AllocEvent], int]:
    with open(fixture_path()) as fh:
        events, cap = parse_trace(fh.read())
    return events, cap


REPORT_COLUMNS = (
    "policy", "capacity", "events", "peak_allocated", "oom", "failing_event", "failing_request",
    "free_at_failure", "max_contiguous_at_failure", "free_fraction_at_failure",
    "reserved", "holes_examined", "bytes_moved", "final_free", "final_max_contiguous",
)


def report_csv(reports: Sequence[FragReport]) -> str:
    buf = io.StringIO()
    buf.write("# schema=1 report=frag units=bytes\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        frac = r.free_fraction_at_failure
        row = [
            r.policy, r.capacity, r.events, r.peak_allocated, int(r.oom),
            "" if r.failing_event is None else r.failing_event,
            "" if r.failing_request is None else r.failing_request,
            "" if r.free_at_failure is None else r.free_at_failure,
            "" if r.max_contiguous_at_failure is None else r.max_contiguous_at_failure,
            "" if frac is None else f"{frac:.4f}",
            r.reserved, r.holes_examined, r.bytes_moved, r.final_free, r.final_max_contiguous,
        ]
        w.writerow(row)
    return buf.getvalue()
