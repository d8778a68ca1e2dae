"""Analytic memory and communication model for data-parallel stages.

All byte figures are plain bytes; ``GB`` below means 1e9 bytes, which is the
unit the published memory tables are printed in.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from fractions import Fraction
from typing import NamedTuple

GB = 10**9
TB = 10**12
ADAM_K = 12
FP16_BYTES = 2
FP32_BYTES = 4


class Stage(str, Enum):
    BASELINE = "base"
    POS = "os"
    POSG = "os+g"
    POSGP = "os+g+p"

    @classmethod
    def parse(cls, text: str) -> "Stage":
        aliases = {
            "baseline": cls.BASELINE, "base": cls.BASELINE, "dp": cls.BASELINE,
            "os": cls.POS, "pos": cls.POS, "p_os": cls.POS,
            "os+g": cls.POSG, "posg": cls.POSG, "p_os+g": cls.POSG,
            "os+g+p": cls.POSGP, "posgp": cls.POSGP, "p_os+g+p": cls.POSGP,
        }
        try:
            return aliases[text.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown stage {text!r}; use base, os, os+g or os+g+p") from None

    @property
    def label(self) -> str:
        return {"base": "Baseline", "os": "P_os", "os+g": "P_os+g", "os+g+p": "P_os+g+p"}[self.value]


STAGES = (Stage.BASELINE, Stage.POS, Stage.POSG, Stage.POSGP)


@dataclass(frozen=True)
class MemoryEstimate:
    params_f16: float = 0
    grads_f16: float = 0
    optimizer: float = 0
    activations: float = 0
    temp_buffers: float = 0

    @property
    def total(self) -> float:
        return self.params_f16 + self.grads_f16 + self.optimizer + self.activations + self.temp_buffers

    @property
    def model_states(self) -> float:
        return self.params_f16 + self.grads_f16 + self.optimizer

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("params_f16", self.params_f16),
            ("grads_f16", self.grads_f16),
            ("optimizer", self.optimizer),
            ("activations", self.activations),
            ("temp_buffers", self.temp_buffers),
            ("total", self.total),
        ]


@dataclass(frozen=True)
class ModelShape:
    psi: float
    hidden_dim: int
    seq_length: int
    batch: int
    transformer_layers: int
    bytes_per_activation_element: int = FP16_BYTES

    def __post_init__(self):
        for name in ("psi", "hidden_dim", "seq_length", "batch", "transformer_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ClusterSpec:
    total_gpus: int
    mp_degree: int = 1
    device_mem_bytes: float = 32 * GB

    def __post_init__(self):
        if self.mp_degree < 1 or self.total_gpus % self.mp_degree:
            raise ValueError(f"{self.total_gpus} GPUs do not split into MP groups of {self.mp_degree}")

    @property
    def dp_degree(self) -> int:
        return self.total_gpus // self.mp_degree


def _ratio(num, den):
    # exact when both are integers, float otherwise
    if isinstance(num, int) and isinstance(den, int) and num % den == 0:
        return num // den
    return num / den


def model_state_bytes(psi, k=ADAM_K, n_d=1, stage: Stage = Stage.BASELINE) -> MemoryEstimate:
    """Per-device bytes for fp16 params, fp16 grads and optimizer states."""
    stage = Stage(stage)
    p, g, o = 2 * psi, 2 * psi, k * psi
    if stage in (Stage.POS, Stage.POSG, Stage.POSGP):
        o = _ratio(o, n_d)
    if stage in (Stage.POSG, Stage.POSGP):
        g = _ratio(g, n_d)
    if stage is Stage.POSGP:
        p = _ratio(p, n_d)
    return MemoryEstimate(params_f16=p, grads_f16=g, optimizer=o)


def bytes_per_param(stage: Stage, n_d: int, k=ADAM_K) -> Fraction:
    est = model_state_bytes(Fraction(1), Fraction(k), Fraction(n_d), stage)
    return Fraction(est.model_states)


def max_model_size(stage: Stage, n_d: int, n_m: int = 1, device_mem_bytes=32 * GB, k=ADAM_K) -> float:
    """Largest Ψ whose model states (split over N_m as well) fit the device."""
    return float(Fraction(device_mem_bytes) * n_m / bytes_per_param(Stage(stage), n_d, k))


class ActivationBytes(NamedTuple):
    device: float
    host: float


def activation_bytes(
    shape: ModelShape,
    checkpointed: bool = False,
    mp_degree: int = 1,
    pa: bool = False,
    pa_cpu: bool = False,
) -> ActivationBytes:
    """Activation memory of a GPT-like transformer.

    Without checkpointing a block holds about 12·h·b·s activation elements;
    with one checkpoint per block it holds h·b·s.  Partitioning divides the
    checkpoints over the MP group; offloading moves them to host memory.
    """
    if mp_degree < 1:
        raise ValueError("mp_degree must be >= 1")
    if pa_cpu and not pa:
        raise ValueError("CPU offload of activation checkpoints requires partitioning")
    per_block = shape.hidden_dim * shape.batch * shape.seq_length
    elems = per_block * shape.transformer_layers * (1 if checkpointed else 12)
    total = elems * shape.bytes_per_activation_element
    if pa:
        total = total / mp_degree
    if pa_cpu:
        return ActivationBytes(0, total)
    return ActivationBytes(total, 0)


def temp_buffer_bytes(psi, fused_fp32: bool = True, cb_limit=None) -> float:
    """Size of the flattened buffer used for gradient collectives.

    A fused buffer holds every gradient (fp32 when ``fused_fp32``); a
    constant-size buffer caps it at ``cb_limit`` bytes.
    """
    size = psi * (FP32_BYTES if fused_fp32 else FP16_BYTES)
    if cb_limit is not None:
        size = min(size, cb_limit)
    return size


def dp_comm_volume(stage: Stage, psi):
    """Per-process elements moved per step, in the large-N limit."""
    return 3 * psi if Stage(stage) is Stage.POSGP else 2 * psi


def dp_comm_volume_exact(stage: Stage, psi_padded: int, n_d: int) -> int:
    """Counted per-rank elements sent per step for a padded Ψ′ over N_d ranks."""
    if psi_padded % n_d:
        raise ValueError("padded Ψ must be a multiple of N_d")
    per_pass = psi_padded // n_d * (n_d - 1)
    return (3 if Stage(stage) is Stage.POSGP else 2) * per_pass


class BlockComm(NamedTuple):
    mp_volume: int
    pa_overhead: int
    pa_cpu_transfer: int
    ratio: Fraction


def mp_comm_per_block(batch: int, seq: int, hidden: int) -> BlockComm:
    """Tensor-slicing MP traffic per transformer block vs. the checkpoint all-gather.

    Six all-reduces of b·s·h elements (forward, recompute, backward) at twice
    the message size each, against one all-gather of b·s·h.  Offloading the
    partitioned checkpoint doubles that movement (out to host and back).
    """
    msg = batch * seq * hidden
    mp = 6 * 2 * msg
    return BlockComm(mp, msg, 2 * msg, Fraction(msg, mp))


def trillion_check(psi=10**12, k=ADAM_K, devices=1024) -> dict:
    total = (2 + 2 + k) * psi
    return {"total_bytes": total, "total_tb": Fraction(total, TB),
            "per_device_bytes": Fraction(total, devices),
            "per_device_gb": Fraction(total, devices * GB)}


# ---------------------------------------------------------------------------
# table reproduction

TABLE1_MODELS = (("7.5B", 7.5e9), ("128B", 128e9), ("1T", 1e12))
TABLE1_DP = (1, 4, 16, 64, 256, 1024)
TABLE1_STAGES = (Stage.POS, Stage.POSG, Stage.POSGP)
TABLE2_ROWS = ((1, 64), (2, 128), (4, 256), (8, 512), (16, 1024))


def _half_up(value: float, places: int) -> Decimal:
    q = Decimal(1).scaleb(-places)
    return Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP)


def printed_gb(value_gb: float) -> str:
    """Format GB the way the memory table prints them.

    Values of 100 GB and up are printed as whole numbers with the fraction
    dropped; 1 to 100 GB carry three significant figures; sub-GB values two
    decimals.  Trailing zeros are stripped.
    """
    if value_gb >= 100:
        return str(int(math.floor(value_gb + 1e-9)))
    if value_gb >= 1:
        places = 2 - int(math.floor(math.log10(value_gb)))
        d = _half_up(value_gb, places)
    else:
        d = _half_up(value_gb, 2)
    text = format(d, "f")
    return text.rstrip("0").rstrip(".") if "." in text else text


def _printed_billions(params: float) -> str:
    text = format(_half_up(params / 1e9, 1), "f")
    return text.rstrip("0").rstrip(".")


def table1_values() -> dict[tuple[int, str, Stage], float]:
    """Exact bytes keyed by (DP, model label, stage)."""
    out = {}
    for dp in TABLE1_DP:
        for label, psi in TABLE1_MODELS:
            for stage in TABLE1_STAGES:
                out[(dp, label, stage)] = model_state_bytes(psi, ADAM_K, dp, stage).model_states
    return out


def table2_values(device_mem_bytes=32 * GB) -> dict[tuple[int, int, Stage], float]:
    out = {}
    for mp, gpus in TABLE2_ROWS:
        for stage in STAGES:
            out[(mp, gpus, stage)] = max_model_size(stage, gpus // mp, mp, device_mem_bytes)
    return out


def fig1_values(psi=7.5e9, n_d=64, k=ADAM_K) -> dict[Stage, MemoryEstimate]:
    return {stage: model_state_bytes(psi, k, n_d, stage) for stage in STAGES}


def emit_table(which: str, exact: bool = False) -> str:
    """CSV for ``table1``, ``table2`` or ``fig1``.

    Values are rounded as the published tables print them unless ``exact``
    is set, in which case raw bytes (or parameter counts) are written.
    """
    if which not in _UNITS:
        raise ValueError(f"unknown table {which!r}; choose table1, table2 or fig1")
    buf = io.StringIO()
    buf.write(f"# schema=1 table={which} units={'bytes' if exact else _UNITS[which]}\n")
    w = csv.writer(buf, lineterminator="\n")
    if which == "table1":
        vals = table1_values()
        w.writerow(["DP"] + [f"{m} Model (GB) {s.label}" for m, _ in TABLE1_MODELS for s in TABLE1_STAGES])
        for dp in TABLE1_DP:
            row = [dp]
            for label, _ in TABLE1_MODELS:
                for s in TABLE1_STAGES:
                    v = vals[(dp, label, s)]
                    row.append(repr(float(v)) if exact else printed_gb(v / GB))
            w.writerow(row)
    elif which == "table2":
        vals = table2_values()
        w.writerow(["MP", "GPUs"] + [f"max model size {s.label}" for s in STAGES])
        for mp, gpus in TABLE2_ROWS:
            row = [mp, gpus]
            for s in STAGES:
                v = vals[(mp, gpus, s)]
                row.append(repr(v) if exact else _printed_billions(v))
            w.writerow(row)
    elif which == "fig1":
        w.writerow(["Stage", "Parameters", "Gradients", "Optimizer States", "Memory Consumed"])
        for stage, est in fig1_values().items():
            cells = [est.params_f16, est.grads_f16, est.optimizer, est.model_states]
            w.writerow([stage.label] + [repr(float(c)) if exact else printed_gb(c / GB) for c in cells])
    return buf.getvalue()


_UNITS = {"table1": "GB", "table2": "billion-params", "fig1": "GB"}
