"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import numpy as np

PRINTED_TABLE1 = {
    # DP: (7.5B: os, os+g, os+g+p), (128B: ...), (1T: ...)
    1: ("120", "120", "120", "2048", "2048", "2048", "16000", "16000", "16000"),
    4: ("52.5", "41.3", "30", "896", "704", "512", "7000", "5500", "4000"),
    16: ("35.6", "21.6", "7.5", "608", "368", "128", "4750", "2875", "1000"),
    64: ("31.4", "16.6", "1.88", "536", "284", "32", "4187", "2218", "250"),
    256: ("30.4", "15.4", "0.47", "518", "263", "8", "4046", "2054", "62.5"),
    1024: ("30.1", "15.1", "0.12", "513", "257", "2", "4011", "2013", "15.6"),
}

PRINTED_TABLE2 = {
    # (MP, GPUs): Baseline, P_os, P_os+g, P_os+g+p
    (1, 64): ("2B", "7.6B", "14.4B", "128B"),
    (2, 128): ("4B", "15.2B", "28.8B", "256B"),
    (4, 256): ("8B", "30.4B", "57.6B", "0.5T"),
    (8, 512): ("16B", "60.8B", "115.2B", "1T"),
    (16, 1024): ("32B", "121.6B", "230.4B", "2T"),
}


def parse_model_size(text: str, tera: float) -> float:
    """'7.6B' -> 7.6e9; 'T' entries scale by ``tera``."""
    if text.endswith("B"):
        return float(text[:-1]) * 1e9
    if text.endswith("T"):
        return float(text[:-1]) * tera
    raise ValueError(text)


def to_half_bits(x) -> np.ndarray:
    """numpy's own binary16 conversion (C implementation), reinterpreted as bits."""
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float32).astype(np.float16).view(np.uint16)


def from_half_bits(h) -> np.ndarray:
    return np.asarray(h, dtype=np.uint16).view(np.float16).astype(np.float32)


def mlp_shapes(input_dim, hidden_dim, output_dim, layers):
    dims = [input_dim] + [hidden_dim] * layers + [output_dim]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def mlp_loss64(shapes, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """fp64 tanh-MLP mean squared error, weights row-major (out, in) then biases."""
    a = x.astype(np.float64)
    off = 0
    for i, (o, n) in enumerate(shapes):
        w = params[off : off + o * n].reshape(o, n)
        off += o * n
        b = params[off : off + o]
        off += o
        z = a @ w.T + b
        a = np.tanh(z) if i < len(shapes) - 1 else z
    d = a - y.astype(np.float64)
    return float(np.mean(d * d))


def mlp_grad64(shapes, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Analytic fp64 gradient of ``mlp_loss64`` (vectorised, independent code path)."""
    acts = [x.astype(np.float64)]
    blocks = []
    off = 0
    for i, (o, n) in enumerate(shapes):
        w = params[off : off + o * n].reshape(o, n)
        b = params[off + o * n : off + o * n + o]
        blocks.append((off, w))
        off += o * n + o
        z = acts[-1] @ w.T + b
        acts.append(np.tanh(z) if i < len(shapes) - 1 else z)
    out = acts[-1]
    delta = 2.0 * (out - y) / out.size
    g = np.zeros_like(params, dtype=np.float64)
    for i in reversed(range(len(shapes))):
        start, w = blocks[i]
        o, n = w.shape
        g[start : start + o * n] = (delta.T @ acts[i]).reshape(-1)
        g[start + o * n : start + o * n + o] = delta.sum(axis=0)
        if i:
            delta = (delta @ w) * (1.0 - acts[i] ** 2)
    return g


def adam64(theta, grads, lr=1e-2, b1=0.9, b2=0.999, eps=1e-8):
    """fp64 bias-corrected Adam trajectory; returns the final parameters."""
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


def central_difference(shapes, params: np.ndarray, x, y, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of ``mlp_loss64`` with step ``h``."""
    p = np.array(params, dtype=np.float64)
    g = np.empty_like(p)
    for i in range(p.size):
        old = p[i]
        p[i] = old + h
        up = mlp_loss64(shapes, p, x, y)
        p[i] = old - h
        down = mlp_loss64(shapes, p, x, y)
        p[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def gradient_rel_error(analytic, reference, floor: float = 1e-4) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor)
    return float(np.max(np.abs(a - r) / scale))


def random_instance(seed: int):
    """Random (dims, layers, fp16 params, batch) with every dim <= 8."""
    gen = np.random.Generator(np.random.PCG64(seed))
    d_in, hid, d_out = (int(v) for v in gen.integers(1, 9, 3))
    layers = int(gen.integers(1, 4))
    shapes = mlp_shapes(d_in, hid, d_out, layers)
    n = sum(o * i + o for o, i in shapes)
    bits = to_half_bits(gen.uniform(-1, 1, n))
    batch = int(gen.integers(1, 9))
    x = gen.uniform(-1, 1, (batch, d_in)).astype(np.float32)
    y = gen.uniform(-1, 1, (batch, d_out)).astype(np.float32)
    return (d_in, hid, d_out, layers), bits, x, y


def fd_check(seed: int, h: float = 1e-3) -> float:
    """Max relative error of the package gradient against central differences."""
    from zerosim.model import Batch, ModelSpec, forward_backward

    dims, bits, x, y = random_instance(seed)
    spec = ModelSpec(*dims)
    _, grads = forward_backward(spec, bits, Batch(x, y))
    params64 = from_half_bits(bits).astype(np.float64)
    fd = central_difference(spec.shapes, params64, x.astype(np.float64), y.astype(np.float64), h)
    return gradient_rel_error(grads, fd)
