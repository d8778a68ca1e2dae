"""Tanh MLP workload with hand-written gradients.

Parameters live in one flat vector.  Each layer block is stored as a row-major
``(out, in)`` weight matrix followed by its ``out`` biases, blocks in forward
order.  Every reduction runs in a fixed ascending order so repeated calls are
bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numerics import NonFiniteError, f16_to_f32


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dim: int
    output_dim: int
    layers: int = 1

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "output_dim", "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        """``(out, in)`` per layer block in forward order."""
        dims = [self.input_dim] + [self.hidden_dim] * self.layers + [self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("inputs and targets must be 2-D")
        if self.inputs.shape[0] != self.targets.shape[0] or self.inputs.shape[0] < 1:
            raise ValueError(
                f"batch sizes disagree or are empty: {self.inputs.shape[0]} vs {self.targets.shape[0]}"
            )

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def shard(self, index: int, count: int) -> "Batch":
        """Contiguous shard ``index`` of ``count`` equal shards."""
        if self.size % count:
            raise ValueError(f"batch of {self.size} does not split into {count} equal shards")
        n = self.size // count
        sl = slice(index * n, (index + 1) * n)
        return Batch(self.inputs[sl], self.targets[sl])


@dataclass(frozen=True)
class LayerRange:
    layer_index: int
    start: int
    end: int

    @property
    def size(self) -> int:
        return self.end - self.start


def param_count(spec: ModelSpec) -> int:
    h = spec.hidden_dim
    return (
        (spec.input_dim + 1) * h
        + (spec.layers - 1) * (h + 1) * h
        + (h + 1) * spec.output_dim
    )


def layer_ranges(spec: ModelSpec) -> list[LayerRange]:
    ranges = []
    start = 0
    for i, (n_out, n_in) in enumerate(spec.shapes):
        end = start + n_out * n_in + n_out
        ranges.append(LayerRange(i, start, end))
        start = end
    return ranges


# fetch(layer_index, phase) -> fp16 bits of that layer's block
ParamFetch = Callable[[int, str], np.ndarray]


def _unpack(spec: ModelSpec, layer: int, block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_out, n_in = spec.shapes[layer]
    if block.shape != (n_out * n_in + n_out,):
        raise ValueError(f"layer {layer} expects {n_out * n_in + n_out} params, got {block.shape}")
    vals = f16_to_f32(block)
    return vals[: n_out * n_in].reshape(n_out, n_in), vals[n_out * n_in :]


def _affine(a: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # bias first, then inputs in ascending index
    z = np.broadcast_to(b, (a.shape[0], b.shape[0])).copy()
    for j in range(w.shape[1]):
        z += a[:, j : j + 1] * w[:, j]
    return z


def _ordered_sum(values: np.ndarray) -> np.float32:
    flat_vals = np.asarray(values, dtype=np.float32).reshape(-1)
    if flat_vals.size == 0:
        return np.float32(0.0)
    return np.add.accumulate(flat_vals, dtype=np.float32)[-1]


def forward_backward_layerwise(
    spec: ModelSpec, fetch: ParamFetch, batch: Batch, batch_id=None
) -> tuple[np.float32, np.ndarray]:
    """Loss and flat fp32 gradient, pulling each layer's params via ``fetch``.

    ``fetch`` is called once per layer in forward order with phase
    ``"forward"`` and once per layer in reverse order with ``"backward"``.
    """
    if batch.inputs.shape[1] != spec.input_dim or batch.targets.shape[1] != spec.output_dim:
        raise ValueError(
            f"batch shapes {batch.inputs.shape}/{batch.targets.shape} do not match {spec}"
        )
    n_layers = len(spec.shapes)
    acts = [np.asarray(batch.inputs, dtype=np.float32)]
    for layer in range(n_layers):
        w, b = _unpack(spec, layer, fetch(layer, "forward"))
        z = _affine(acts[-1], w, b)
        acts.append(np.tanh(z) if layer < n_layers - 1 else z)

    out = acts[-1]
    targets = np.asarray(batch.targets, dtype=np.float32)
    diff = out - targets
    denom = np.float32(out.shape[0] * out.shape[1])
    loss = _ordered_sum(diff * diff) / denom
    delta = (np.float32(2.0) / denom) * diff

    ranges = layer_ranges(spec)
    grads = np.zeros(ranges[-1].end, dtype=np.float32)
    for layer in reversed(range(n_layers)):
        w, _ = _unpack(spec, layer, fetch(layer, "backward"))
        a_prev = acts[layer]
        gw = np.zeros_like(w)
        gb = np.zeros(w.shape[0], dtype=np.float32)
        for s in range(a_prev.shape[0]):
            gw += np.outer(delta[s], a_prev[s])
            gb += delta[s]
        r = ranges[layer]
        grads[r.start : r.start + w.size] = gw.reshape(-1)
        grads[r.start + w.size : r.end] = gb
        if layer > 0:
            da = np.zeros_like(a_prev)
            for o in range(w.shape[0]):
                da += delta[:, o : o + 1] * w[o]
            delta = da * (np.float32(1.0) - a_prev * a_prev)

    if not (np.isfinite(loss) and np.all(np.isfinite(grads))):
        label = "?" if batch_id is None else batch_id
        raise NonFiniteError(f"non-finite loss or gradient on batch {label}")
    return np.float32(loss), grads


def forward_backward(
    spec: ModelSpec, params_f16: Sequence[int] | np.ndarray, batch: Batch, batch_id=None
) -> tuple[np.float32, np.ndarray]:
    """Mean-squared-error loss of the tanh MLP and its gradient (length Ψ)."""
    params = np.asarray(params_f16, dtype=np.uint16)
    ranges = layer_ranges(spec)
    if params.shape[0] < ranges[-1].end:
        raise ValueError(f"expected {ranges[-1].end} params, got {params.shape[0]}")

    def fetch(layer: int, phase: str) -> np.ndarray:
        r = ranges[layer]
        return params[r.start : r.end]

    return forward_backward_layerwise(spec, fetch, batch, batch_id)


def synthetic_batch(spec: ModelSpec, batch_size: int, seed: int, step: int) -> Batch:
    """Deterministic regression batch for ``step``: targets are a fixed smooth map of inputs."""
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, step, 0xDA7A])))
    x = gen.uniform(-1.0, 1.0, size=(batch_size, spec.input_dim)).astype(np.float32)
    teacher = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7EAC]))).uniform(
        -1.0, 1.0, size=(spec.input_dim, spec.output_dim)
    )
    y = np.sin(x.astype(np.float64) @ teacher).astype(np.float32)
    return Batch(x, y)
