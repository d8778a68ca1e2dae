"""Software binary16 casts, flat tensors and seeded randomness.

Half-precision values are carried as ``np.uint16`` bit patterns.  The casts
below work on the raw integer encodings so results do not depend on whether
the host has native half support.
"""

from __future__ import annotations

import numpy as np

HALF_DTYPE = np.dtype(np.uint16)
FLAT_DTYPE = np.dtype(np.float32)

HALF_ZERO = 0x0000
HALF_ONE = 0x3C00
HALF_POS_INF = 0x7C00
HALF_NEG_INF = 0xFC00
HALF_MAX = 65504.0


class NonFiniteError(ArithmeticError):
    """A training tensor contains NaN or infinity."""


def _scalar_or_array(result: np.ndarray, was_scalar: bool):
    return result[()] if was_scalar else result


def f32_to_f16(x) -> np.ndarray:
    """Round fp32 values to binary16 bit patterns (round-to-nearest-even).

    Overflow produces signed infinity; NaN maps to a quiet NaN with the same
    sign.  Accepts scalars or arrays, returns ``np.uint16`` of the same shape.
    """
    arr = np.asarray(x, dtype=np.float32)
    was_scalar = arr.ndim == 0
    bits = np.atleast_1d(arr).view(np.uint32)

    sign = ((bits >> 16) & 0x8000).astype(np.uint32)
    exp = ((bits >> 23) & 0xFF).astype(np.int32)
    mant = bits & 0x007FFFFF
    out = np.zeros(bits.shape, dtype=np.uint32)

    # normal range of the result: unbiased exponent in [-14, 15]
    half_exp = exp - 127 + 15
    normal = (half_exp >= 1) & (exp != 0xFF)
    base = (np.clip(half_exp, 0, 31).astype(np.uint32) << 10) | (mant >> 13)
    rem = mant & 0x1FFF
    round_up = (rem > 0x1000) | ((rem == 0x1000) & ((base & 1) == 1))
    normal_bits = base + round_up.astype(np.uint32)
    # a carry out of the top exponent lands exactly on 0x7C00 (infinity)
    normal_bits = np.where(half_exp >= 31, HALF_POS_INF, normal_bits)
    normal_bits = np.minimum(normal_bits, HALF_POS_INF)
    out = np.where(normal, normal_bits, out)

    # subnormal / underflow range
    sub = (half_exp < 1) & (exp != 0)
    shift = np.clip(126 - exp, 1, 31).astype(np.uint32)
    full = mant | 0x00800000
    sub_base = full >> shift
    sub_rem = full & ((np.uint32(1) << shift) - np.uint32(1))
    halfway = np.uint32(1) << (shift - np.uint32(1))
    sub_up = (sub_rem > halfway) | ((sub_rem == halfway) & ((sub_base & 1) == 1))
    sub_bits = sub_base + sub_up.astype(np.uint32)
    sub_bits = np.where(shift > 25, 0, sub_bits)
    out = np.where(sub, sub_bits, out)

    special = exp == 0xFF
    nan = special & (mant != 0)
    out = np.where(special, HALF_POS_INF, out)
    out = np.where(nan, 0x7E00, out)

    result = (out | sign).astype(np.uint16)
    return _scalar_or_array(result.reshape(arr.shape), was_scalar)


def f16_to_f32(h) -> np.ndarray:
    """Exact widening of binary16 bit patterns to fp32."""
    arr = np.asarray(h)
    if arr.dtype != np.uint16:
        arr = arr.astype(np.uint16)
    was_scalar = arr.ndim == 0
    h32 = np.atleast_1d(arr).astype(np.uint32)

    sign = (h32 & 0x8000) << 16
    exp = (h32 >> 10) & 0x1F
    mant = h32 & 0x03FF

    normal_bits = sign | ((exp + 112) << 23) | (mant << 13)
    special_bits = sign | 0x7F800000 | (mant << 13)
    out_bits = np.where(exp == 31, special_bits, normal_bits)
    out_bits = np.where(exp == 0, sign, out_bits)
    out = out_bits.view(np.float32).copy()

    # subnormals: mant * 2**-24 is exact in fp32
    sub = (exp == 0) & (mant != 0)
    if sub.any():
        mag = mant[sub].astype(np.float32) * np.float32(2.0**-24)
        out[sub] = np.where(sign[sub] != 0, -mag, mag)
    return _scalar_or_array(out.reshape(arr.shape), was_scalar)


def half_is_finite(h) -> np.ndarray:
    return (np.asarray(h, dtype=np.uint16) & 0x7C00) != 0x7C00


def flat(values=(), dtype=FLAT_DTYPE) -> np.ndarray:
    """Build a contiguous 1-D fp32 tensor (copying)."""
    return np.ascontiguousarray(np.asarray(values, dtype=dtype).reshape(-1))


def check_finite(values: np.ndarray, what: str) -> None:
    if values.dtype == np.uint16:
        ok = bool(np.all(half_is_finite(values)))
    else:
        ok = bool(np.all(np.isfinite(values)))
    if not ok:
        raise NonFiniteError(f"non-finite value in {what}")


class SeededRng:
    """Seeded stream built on numpy's PCG64 bit generator.

    Streams are reproducible for a given seed across runs; nothing is
    promised about equality with other PRNG implementations.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, n: int, scale: float) -> np.ndarray:
        if n < 0:
            raise ValueError(f"count must be non-negative, got {n}")
        vals = self._gen.uniform(-scale, scale, size=n)
        return np.clip(vals, -scale, scale).astype(np.float32)

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream keyed by an integer (step, rank, ...)."""
        state = np.random.SeedSequence([self.seed, int(key)]).generate_state(1, np.uint64)
        return SeededRng(int(state[0]))


def rng_fill(rng: SeededRng, n: int, scale: float) -> np.ndarray:
    """``n`` fp32 values uniform in ``[-scale, scale]`` drawn from ``rng``."""
    return rng.uniform(n, scale)
