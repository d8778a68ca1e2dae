"""Mixed-precision Adam over one contiguous shard of the flat parameter space.

A shard keeps three fp32 arrays (master copy, momentum, variance), so its
resident optimizer footprint is 12 bytes per element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import NonFiniteError, check_finite, f32_to_f16, half_is_finite

OPTIMIZER_BYTES_PER_ELEMENT = 12


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_scale: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.lr <= 0 or self.eps <= 0 or self.loss_scale <= 0:
            raise ValueError("lr, eps and loss_scale must be positive")


@dataclass
class OptimizerShard:
    start: int
    end: int
    master: np.ndarray
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        n = self.end - self.start
        self.master = np.array(self.master, dtype=np.float32, copy=True)
        if self.master.shape != (n,):
            raise ValueError(f"master has {self.master.shape[0]} values for range of {n}")
        if self.m is None:
            self.m = np.zeros(n, dtype=np.float32)
        if self.v is None:
            self.v = np.zeros(n, dtype=np.float32)

    @classmethod
    def from_full(cls, full_master: np.ndarray, start: int, end: int) -> "OptimizerShard":
        return cls(start, end, full_master[start:end])

    def __len__(self) -> int:
        return self.end - self.start

    @property
    def resident_bytes(self) -> int:
        return self.master.nbytes + self.m.nbytes + self.v.nbytes


def adam_step(shard: OptimizerShard, grad: np.ndarray, hyper: AdamHyper) -> OptimizerShard:
    """One bias-corrected Adam update of ``shard`` in place (fp32 throughout).

    ``grad`` must already be averaged across ranks and unscaled.
    """
    g = np.asarray(grad, dtype=np.float32)
    if g.shape != shard.master.shape:
        raise ValueError(f"gradient length {g.shape[0]} != shard length {len(shard)}")
    check_finite(g, f"gradient for range [{shard.start}, {shard.end})")

    one = np.float32(1.0)
    b1 = np.float32(hyper.beta1)
    b2 = np.float32(hyper.beta2)
    lr = np.float32(hyper.lr)
    eps = np.float32(hyper.eps)

    shard.step_count += 1
    t = shard.step_count
    shard.m = b1 * shard.m + (one - b1) * g
    shard.v = b2 * shard.v + (one - b2) * (g * g)
    m_hat = shard.m / (one - b1**t)
    v_hat = shard.v / (one - b2**t)
    shard.master = shard.master - lr * m_hat / (np.sqrt(v_hat) + eps)
    return shard


def materialize_f16(shard: OptimizerShard) -> np.ndarray:
    """RTNE fp16 copy of the shard's master values."""
    out = f32_to_f16(shard.master)
    if not np.all(half_is_finite(out)):
        bad = int(np.flatnonzero(~half_is_finite(out))[0]) + shard.start
        raise NonFiniteError(f"master value at index {bad} overflows fp16")
    return out
