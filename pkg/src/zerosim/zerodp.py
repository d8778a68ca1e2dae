"""Data-parallel stage engines: baseline, P_os, P_os+g and P_os+g+p.

Each rank runs the same per-step program (``rank_step``) against a
``ProcessGroup``; the program is transport-agnostic, so the same code drives
the in-process fabric and the socket transport.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .collectives import (
    Bucket,
    CommStats,
    ProcessGroup,
    all_reduce,
    bucketed_reduce_to_owner,
    reduce_scatter,
    ring_all_gather,
    ring_broadcast,
)
from .model import Batch, ModelSpec, forward_backward, forward_backward_layerwise, layer_ranges, param_count, synthetic_batch
from .mpadam import AdamHyper, OptimizerShard, adam_step, materialize_f16
from .numerics import NonFiniteError, SeededRng, f32_to_f16, half_is_finite, rng_fill
from .planner import STAGES, MemoryEstimate, Stage, model_state_bytes
from .transport import ProtocolError, SimFabric, TcpEndpoint, free_loopback_roster

log = logging.getLogger(__name__)

INIT_SCALE = 0.5


@dataclass(frozen=True)
class PartitionLayout:
    psi: int
    n_ranks: int
    padded: int
    ranges: tuple[tuple[int, int], ...]

    @property
    def chunk(self) -> int:
        return self.padded // self.n_ranks

    def owner_of(self, index: int) -> int:
        return index // self.chunk


def make_layout(psi: int, n_ranks: int) -> PartitionLayout:
    if psi < 1 or n_ranks < 1:
        raise ValueError(f"need psi >= 1 and n_ranks >= 1, got {psi}, {n_ranks}")
    padded = -(-psi // n_ranks) * n_ranks
    c = padded // n_ranks
    return PartitionLayout(psi, n_ranks, padded, tuple((r * c, (r + 1) * c) for r in range(n_ranks)))


@dataclass
class RankState:
    rank: int
    layout: PartitionLayout
    spec: ModelSpec
    group: ProcessGroup
    params_f16: np.ndarray
    grads_f16: np.ndarray
    opt: OptimizerShard
    steps_done: int = 0

    @property
    def owned(self) -> tuple[int, int]:
        return self.layout.ranges[self.rank]


@dataclass
class StepReport:
    step: int
    rank: int
    loss: float
    comm: CommStats
    state_bytes: MemoryEstimate
    bucket_peak: int = 0
    bucket_rounds: int = 0
    peak_cached_chunks: int = 0

    @property
    def elements_sent(self) -> int:
        return self.comm.elements_sent


@dataclass(frozen=True)
class Fault:
    """Add ``delta`` to rank 0's gradient element ``index`` at ``step`` of ``stage``."""
    stage: Stage
    n_ranks: int
    step: int
    index: int
    delta: float = 1.0


def initial_master(psi: int, padded: int, seed: int) -> np.ndarray:
    full = np.zeros(padded, dtype=np.float32)
    full[:psi] = rng_fill(SeededRng(seed), psi, INIT_SCALE)
    return full


def init_rank_state(stage: Stage, group: ProcessGroup, spec: ModelSpec, layout: PartitionLayout, seed: int) -> RankState:
    master = initial_master(layout.psi, layout.padded, seed)
    start, end = layout.ranges[group.rank]
    if stage is Stage.BASELINE:
        opt = OptimizerShard(0, layout.padded, master)
    else:
        opt = OptimizerShard.from_full(master, start, end)
    full16 = f32_to_f16(master)
    params = full16[start:end].copy() if stage is Stage.POSGP else full16
    grads_len = layout.padded if stage in (Stage.BASELINE, Stage.POS) else end - start
    return RankState(group.rank, layout, spec, group, params, np.zeros(grads_len, np.uint16), opt)


def measured_state_bytes(state: RankState, stage: Stage | None = None) -> MemoryEstimate:
    """Logical bytes resident for model states on this rank between steps."""
    return MemoryEstimate(
        params_f16=int(state.params_f16.nbytes),
        grads_f16=int(state.grads_f16.nbytes),
        optimizer=int(state.opt.resident_bytes),
    )


class ParamStreamer:
    """Per-layer parameter fetch for P_os+g+p.

    Every partition chunk overlapping the requested layer is broadcast from
    its owner and cached; chunks no longer needed by the current layer are
    dropped first.  A new pass (forward -> backward) starts from an empty
    cache, so each chunk is broadcast exactly once per pass.
    """

    def __init__(self, group: ProcessGroup, layout: PartitionLayout, spec: ModelSpec, owned_f16: np.ndarray):
        self.group = group
        self.layout = layout
        self.owned = owned_f16
        self.ranges = layer_ranges(spec)
        self.chunks_for_layer = chunk_schedule(layout, spec)
        self.cache: dict[int, np.ndarray] = {}
        self.phase: str | None = None
        self.peak_cached = 0

    def fetch(self, layer: int, phase: str) -> np.ndarray:
        if phase != self.phase:
            self.cache.clear()
            self.phase = phase
        needed = self.chunks_for_layer[layer]
        for c in [c for c in self.cache if c not in needed]:
            del self.cache[c]
        c_len = self.layout.chunk
        for c in needed:
            if c not in self.cache:
                mine = self.owned if c == self.group.rank else None
                self.cache[c] = ring_broadcast(self.group, c, mine, length=c_len)
        non_owned = sum(1 for c in self.cache if c != self.group.rank)
        self.peak_cached = max(self.peak_cached, non_owned)
        r = self.ranges[layer]
        first = needed[0]
        window = np.concatenate([self.cache[c] for c in needed])
        return window[r.start - first * c_len : r.end - first * c_len]

    def release(self) -> None:
        self.cache.clear()
        self.phase = None


def chunk_schedule(layout: PartitionLayout, spec: ModelSpec) -> list[list[int]]:
    """Partition chunks each layer touches; padding-only chunks ride on the last layer."""
    c = layout.chunk
    sched = [list(range(r.start // c, (r.end - 1) // c + 1)) for r in layer_ranges(spec)]
    touched = {k for ks in sched for k in ks}
    sched[-1].extend(k for k in range(layout.n_ranks) if k not in touched)
    return sched


def residency_bound(layout: PartitionLayout, spec: ModelSpec, rank: int) -> int:
    """Most non-owned chunks any single layer needs at once."""
    return max(sum(1 for k in ks if k != rank) for ks in chunk_schedule(layout, spec))


def _finite_f16(g16: np.ndarray, step: int, rank: int) -> None:
    if not np.all(half_is_finite(g16)):
        idx = int(np.flatnonzero(~half_is_finite(g16))[0])
        raise NonFiniteError(f"fp16 gradient overflow at index {idx} (rank {rank}, batch {step})")


def rank_step(
    stage: Stage,
    state: RankState,
    batch: Batch,
    hyper: AdamHyper,
    bucket_capacity: int | None = None,
    fault: Fault | None = None,
) -> StepReport:
    """One training step of ``stage`` on this rank; all ranks must call it together."""
    group, lay, spec = state.group, state.layout, state.spec
    n = group.n_ranks
    step = state.steps_done
    before = group.stats.snapshot()
    start, end = state.owned
    peak_cached = 0

    if stage is Stage.POSGP:
        streamer = ParamStreamer(group, lay, spec, state.params_f16)
        loss, g32 = forward_backward_layerwise(spec, streamer.fetch, batch, batch_id=step)
        streamer.release()
        peak_cached = streamer.peak_cached
    else:
        loss, g32 = forward_backward(spec, state.params_f16, batch, batch_id=step)

    scale = np.float32(hyper.loss_scale)
    grads = np.zeros(lay.padded, dtype=np.float32)
    grads[: lay.psi] = g32 * scale
    if (fault is not None and fault.stage is stage and fault.n_ranks == n
            and fault.step == step and group.rank == 0):
        grads[fault.index] += np.float32(fault.delta)
    g16 = f32_to_f16(grads)
    _finite_f16(g16, step, group.rank)

    bucket = None
    if stage is Stage.BASELINE:
        summed = all_reduce(group, g16)
        state.grads_f16 = g16
    elif stage is Stage.POS:
        summed = reduce_scatter(group, g16)
        state.grads_f16 = g16
    else:
        bucket = Bucket(bucket_capacity or lay.padded)
        summed = bucketed_reduce_to_owner(group, g16, lay, bucket)
        # non-owned gradient memory is released here
        state.grads_f16 = g16[start:end].copy()

    avg = (summed / np.float32(n)) / scale
    adam_step(state.opt, avg, hyper)
    fresh = materialize_f16(state.opt)
    if stage is Stage.BASELINE:
        state.params_f16 = fresh
    elif stage is Stage.POSGP:
        state.params_f16 = fresh
    else:
        state.params_f16 = ring_all_gather(group, fresh)

    state.steps_done += 1
    return StepReport(
        step=step,
        rank=group.rank,
        loss=float(loss),
        comm=group.stats.snapshot() - before,
        state_bytes=measured_state_bytes(state, stage),
        bucket_peak=bucket.peak_staged if bucket else 0,
        bucket_rounds=bucket.rounds if bucket else 0,
        peak_cached_chunks=peak_cached,
    )


def owned_master(state: RankState) -> np.ndarray:
    start, end = state.owned
    if state.opt.start == 0 and state.opt.end == state.layout.padded:
        return state.opt.master[start:end]
    return state.opt.master


def gather_master(state: RankState) -> np.ndarray:
    """Full fp32 master vector on every rank (collective)."""
    return ring_all_gather(state.group, np.ascontiguousarray(owned_master(state)))


def digest(master: np.ndarray, psi: int) -> str:
    """64-bit hex digest of the first ``psi`` fp32 master values."""
    data = np.asarray(master[:psi], dtype="<f4").tobytes()
    return hashlib.blake2b(data, digest_size=8).hexdigest()


# ---------------------------------------------------------------------------
# drivers


@dataclass
class RunConfig:
    stage: Stage = Stage.POSGP
    n_ranks: int = 4
    spec: ModelSpec = field(default_factory=lambda: ModelSpec(2, 8, 1, 2))
    steps: int = 50
    seed: int = 7
    batch_size: int = 16
    bucket_capacity: int | None = None
    hyper: AdamHyper = field(default_factory=AdamHyper)

    def validate(self) -> None:
        if self.n_ranks < 1:
            raise ValueError("n_ranks must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size % self.n_ranks:
            raise ValueError(
                f"global batch of {self.batch_size} is not divisible by {self.n_ranks} ranks"
            )
        if self.bucket_capacity is not None and self.bucket_capacity < 1:
            raise ValueError("bucket capacity must be >= 1")


@dataclass
class RankRun:
    rank: int
    reports: list[StepReport]
    masters: list[np.ndarray]
    params: list[np.ndarray]
    final_master: np.ndarray | None = None
    all_losses: np.ndarray | None = None  # (n_ranks, steps) fp32, when gathered

    def global_losses(self) -> list[float]:
        """Mean of the per-rank shard losses at every step (equal shard sizes)."""
        if self.all_losses is None:
            raise ValueError("losses were not gathered for this run")
        return [float(np.mean(self.all_losses[:, i], dtype=np.float64)) for i in range(self.all_losses.shape[1])]


def run_rank_program(
    stage: Stage,
    group: ProcessGroup,
    cfg: RunConfig,
    fault: Fault | None = None,
    record: bool = False,
    gather_final: bool = True,
    gather_losses: bool = False,
) -> RankRun:
    """Initialise one rank and train it for ``cfg.steps`` steps."""
    layout = make_layout(param_count(cfg.spec), group.n_ranks)
    state = init_rank_state(stage, group, cfg.spec, layout, cfg.seed)
    run = RankRun(group.rank, [], [], [])
    if record:
        run.masters.append(owned_master(state).copy())
        run.params.append(state.params_f16.copy())
    for step in range(cfg.steps):
        batch = synthetic_batch(cfg.spec, cfg.batch_size, cfg.seed, step).shard(group.rank, group.n_ranks)
        run.reports.append(rank_step(stage, state, batch, cfg.hyper, cfg.bucket_capacity, fault))
        if record:
            run.masters.append(owned_master(state).copy())
            run.params.append(state.params_f16.copy())
    if gather_final:
        run.final_master = gather_master(state)
    if gather_losses and cfg.steps:
        mine = np.array([r.loss for r in run.reports], dtype=np.float32)
        run.all_losses = ring_all_gather(group, mine).reshape(group.n_ranks, cfg.steps)
    return run


def run_sim(stage: Stage, cfg: RunConfig, fault: Fault | None = None, record: bool = False,
            gather_losses: bool = False) -> list[RankRun]:
    cfg.validate()
    fabric = SimFabric(cfg.n_ranks)
    groups = [ProcessGroup(fabric.endpoint(r)) for r in range(cfg.n_ranks)]
    return fabric.run([
        (lambda g=g: run_rank_program(stage, g, cfg, fault, record, gather_losses=gather_losses))
        for g in groups
    ])


def build_sim_ranks(stage: Stage, spec: ModelSpec, n_ranks: int, seed: int) -> list[RankState]:
    fabric = SimFabric(n_ranks)
    layout = make_layout(param_count(spec), n_ranks)
    return [init_rank_state(stage, ProcessGroup(fabric.endpoint(r)), spec, layout, seed) for r in range(n_ranks)]


def train_step(
    stage: Stage,
    ranks: list[RankState],
    global_batch: Batch,
    hyper: AdamHyper,
    bucket_capacity: int | None = None,
) -> list[StepReport]:
    """Advance every simulated rank by one step; the batch is split in rank order."""
    n = len(ranks)
    if global_batch.size % n:
        raise ValueError(f"global batch of {global_batch.size} is not divisible by {n} ranks")
    fabric = ranks[0].group.endpoint.fabric
    return fabric.run([
        (lambda st=st: rank_step(stage, st, global_batch.shard(st.rank, n), hyper, bucket_capacity))
        for st in ranks
    ])


def _full_params(stage: Stage, runs: list[RankRun], step: int) -> list[np.ndarray]:
    if stage is Stage.POSGP:
        return [np.concatenate([r.params[step] for r in runs])]
    return [r.params[step] for r in runs]


@dataclass(frozen=True)
class Divergence:
    n_ranks: int
    seed: int
    stage: Stage
    step: int
    index: int
    what: str
    rank: int | None = None

    def describe(self) -> str:
        where = "" if self.rank is None else f" on rank {self.rank}"
        when = "initialisation" if self.step < 0 else f"step {self.step}"
        return (f"N={self.n_ranks} seed={self.seed} stage={self.stage.value}: {self.what} diverge "
                f"from baseline at {when}, index {self.index}{where}")


@dataclass
class Verdict:
    divergences: list[Divergence] = field(default_factory=list)
    checked: list[tuple[int, int, Stage]] = field(default_factory=list)
    runs: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return not self.divergences


def _first_diff(a: np.ndarray, b: np.ndarray) -> int | None:
    if a.shape != b.shape:
        return min(a.shape[0], b.shape[0])
    bad = np.flatnonzero(a.view(np.uint32 if a.dtype == np.float32 else np.uint16)
                         != b.view(np.uint32 if b.dtype == np.float32 else np.uint16))
    return int(bad[0]) if bad.size else None


def compare_to_baseline(stage: Stage, base: list[RankRun], other: list[RankRun], n: int, seed: int) -> Divergence | None:
    """First step/index where ``other`` departs bitwise from the baseline run."""
    for snap in range(len(base[0].masters)):
        step = snap - 1  # snapshot 0 is the shared initial state
        ref_master = np.concatenate([r.masters[snap] for r in base])
        got_master = np.concatenate([r.masters[snap] for r in other])
        i = _first_diff(ref_master, got_master)
        if i is not None:
            return Divergence(n, seed, stage, step, i, "fp32 masters")
        ref_params = base[0].params[snap]
        for rank, p in enumerate(_full_params(stage, other, snap)):
            i = _first_diff(ref_params, p)
            if i is not None:
                return Divergence(n, seed, stage, step, i, "fp16 params",
                                  None if stage is Stage.POSGP else rank)
    return None


def run_equivalence_suite(
    spec: ModelSpec = ModelSpec(2, 8, 1, 2),
    n_ranks_list=(1, 2, 4, 8),
    steps: int = 50,
    seed: int | tuple[int, ...] = 7,
    fault: Fault | None = None,
    batch_size: int = 16,
    bucket_capacity: int | None = None,
    hyper: AdamHyper = AdamHyper(),
    keep_runs: bool = False,
) -> Verdict:
    """Run baseline as the oracle and every partitioned stage against it, per N and seed."""
    seeds = (seed,) if isinstance(seed, int) else tuple(seed)
    verdict = Verdict()
    for s in seeds:
        for n in n_ranks_list:
            cfg = RunConfig(Stage.BASELINE, n, spec, steps, s, batch_size, bucket_capacity, hyper)
            base = run_sim(Stage.BASELINE, cfg, fault, record=True)
            if keep_runs:
                verdict.runs[(n, s, Stage.BASELINE)] = base
            for stage in STAGES[1:]:
                cfg_stage = RunConfig(stage, n, spec, steps, s, batch_size, bucket_capacity, hyper)
                other = run_sim(stage, cfg_stage, fault, record=True)
                if keep_runs:
                    verdict.runs[(n, s, stage)] = other
                verdict.checked.append((n, s, stage))
                d = compare_to_baseline(stage, base, other, n, s)
                if d is not None:
                    verdict.divergences.append(d)
    return verdict


def planner_agrees(state: RankState, stage: Stage) -> bool:
    measured = measured_state_bytes(state, stage)
    planned = model_state_bytes(state.layout.padded, 12, state.layout.n_ranks, stage)
    return (measured.params_f16, measured.grads_f16, measured.optimizer) == (
        planned.params_f16, planned.grads_f16, planned.optimizer)


# ---------------------------------------------------------------------------
# socket transport


def tcp_rank_main(rank: int, roster, stages, cfg: RunConfig, fault: Fault | None = None,
                  record: bool = False, timeout: float = 60.0,
                  gather_losses: bool = False) -> dict[Stage, RankRun]:
    """Join the mesh as ``rank`` and run each stage in turn on the same connections."""
    endpoint = TcpEndpoint(rank, roster, timeout=timeout)
    try:
        out = {}
        for stage in stages:
            group = ProcessGroup(endpoint)
            out[Stage(stage)] = run_rank_program(Stage(stage), group, cfg, fault, record=record,
                                                gather_losses=gather_losses)
        return out
    finally:
        endpoint.close()


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "stage": cfg.stage.value,
        "n_ranks": cfg.n_ranks,
        "spec": [cfg.spec.input_dim, cfg.spec.hidden_dim, cfg.spec.output_dim, cfg.spec.layers],
        "steps": cfg.steps,
        "seed": cfg.seed,
        "batch_size": cfg.batch_size,
        "bucket_capacity": cfg.bucket_capacity,
        "hyper": [cfg.hyper.lr, cfg.hyper.beta1, cfg.hyper.beta2, cfg.hyper.eps, cfg.hyper.loss_scale],
    }


def config_from_dict(d: dict) -> RunConfig:
    return RunConfig(
        stage=Stage(d["stage"]),
        n_ranks=int(d["n_ranks"]),
        spec=ModelSpec(*d["spec"]),
        steps=int(d["steps"]),
        seed=int(d["seed"]),
        batch_size=int(d["batch_size"]),
        bucket_capacity=d["bucket_capacity"],
        hyper=AdamHyper(*d["hyper"]),
    )


def fault_to_dict(fault: Fault | None) -> dict | None:
    if fault is None:
        return None
    return {"stage": fault.stage.value, "n_ranks": fault.n_ranks, "step": fault.step,
            "index": fault.index, "delta": fault.delta}


def fault_from_dict(d: dict | None) -> Fault | None:
    if d is None:
        return None
    return Fault(Stage(d["stage"]), d["n_ranks"], d["step"], d["index"], d["delta"])


def _launch_workers(job: dict, roster, workdir: str, timeout: float):
    import json
    import os
    import subprocess
    import sys

    job_path = os.path.join(workdir, "job.json")
    with open(job_path, "w") as fh:
        json.dump(dict(job, roster=[list(a) for a in roster]), fh)
    procs = []
    for r in range(len(roster)):
        out = os.path.join(workdir, f"rank{r}.npz")
        cmd = [sys.executable, "-m", "zerosim.rankworker", job_path, str(r), out]
        procs.append((subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True), out))
    failures = []
    for r, (p, _) in enumerate(procs):
        try:
            _, err = p.communicate(timeout=timeout * 4)
        except subprocess.TimeoutExpired:
            p.kill()
            _, err = p.communicate()
        if p.returncode != 0:
            failures.append(f"rank {r} exited {p.returncode}: {err.strip().splitlines()[-1] if err.strip() else ''}")
    if failures:
        raise ProtocolError("; ".join(failures))
    return [out for _, out in procs]


def run_tcp(
    stages,
    cfg: RunConfig,
    roster=None,
    fault: Fault | None = None,
    record: bool = False,
    timeout: float = 60.0,
    gather_losses: bool = False,
) -> dict[Stage, list[RankRun]]:
    """Run ``stages`` with one OS process per rank over loopback sockets.

    Returns the same per-rank ``RankRun`` lists as ``run_sim``.
    """
    import tempfile

    from .rankworker import load_result

    cfg.validate()
    roster = list(roster) if roster is not None else free_loopback_roster(cfg.n_ranks)
    if len(roster) != cfg.n_ranks:
        raise ValueError(f"roster lists {len(roster)} ranks, config wants {cfg.n_ranks}")
    job = {"stages": [Stage(s).value for s in stages], "config": config_to_dict(cfg),
           "fault": fault_to_dict(fault), "record": record, "timeout": timeout,
           "gather_losses": gather_losses}
    with tempfile.TemporaryDirectory(prefix="zerosim-tcp-") as tmp:
        paths = _launch_workers(job, roster, tmp, timeout)
        per_rank = [load_result(p) for p in paths]
    return {Stage(s): [res[Stage(s)] for res in per_rank] for s in job["stages"]}
