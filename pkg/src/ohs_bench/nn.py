"""Residual-block MLP with hand-written backprop and Adam.

Every network in the toolkit (policies and critics) is an instance of one
architecture family::

    h = x @ W_in + b_in
    for each block:
        h = h + LayerNorm(elu(h @ W1 + b1) @ W2 + b2)
    y = h @ W_out + b_out

Parameters live in a single flat float64 vector so the optimizer and the
weight-file format can treat them uniformly; named segments are views into it.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

LN_EPS = 1e-5
WEIGHT_MAGIC = b"OHSW"
WEIGHT_VERSION = 1
_WEIGHT_HEADER = struct.Struct("<4s6I")


class TrainingError(RuntimeError):
    """Raised when an optimizer receives non-finite values."""


def param_count(input_dim: int, output_dim: int, hidden_size: int, num_blocks: int) -> int:
    block = 2 * hidden_size * hidden_size + 4 * hidden_size
    return (input_dim * hidden_size + hidden_size
            + num_blocks * block
            + hidden_size * output_dim + output_dim)


def segment_layout(input_dim, output_dim, hidden_size, num_blocks):
    """Ordered ``(name, shape)`` pairs; this order is also the on-disk order."""
    h = hidden_size
    layout = [("in.W", (input_dim, h)), ("in.b", (h,))]
    for k in range(num_blocks):
        layout += [
            (f"block{k}.W1", (h, h)), (f"block{k}.b1", (h,)),
            (f"block{k}.W2", (h, h)), (f"block{k}.b2", (h,)),
            (f"block{k}.ln_g", (h,)), (f"block{k}.ln_b", (h,)),
        ]
    layout += [("out.W", (h, output_dim)), ("out.b", (output_dim,))]
    return layout


@lru_cache(maxsize=None)
def _offsets(input_dim, output_dim, hidden_size, num_blocks):
    out, offset = [], 0
    for name, shape in segment_layout(input_dim, output_dim, hidden_size, num_blocks):
        size = math.prod(shape)
        out.append((name, offset, offset + size, shape))
        offset += size
    return tuple(out)


@dataclass
class MlpParams:
    input_dim: int
    output_dim: int
    hidden_size: int
    num_blocks: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = param_count(self.input_dim, self.output_dim, self.hidden_size, self.num_blocks)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {self.values.shape}")

    @property
    def shape_key(self) -> tuple[int, int, int, int]:
        return (self.input_dim, self.output_dim, self.hidden_size, self.num_blocks)

    def segments(self, values: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Named views into ``values`` (defaults to this object's parameters)."""
        flat = self.values if values is None else values
        return {name: flat[lo:hi].reshape(shape) for name, lo, hi, shape in _offsets(*self.shape_key)}

    def copy(self) -> MlpParams:
        return MlpParams(*self.shape_key, values=self.values.copy())

    def with_values(self, values: np.ndarray) -> MlpParams:
        return MlpParams(*self.shape_key, values=values)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def quantized(self) -> MlpParams:
        """Round to float32 so the weight file round-trips bit-exactly."""
        return self.with_values(self.values.astype(np.float32).astype(np.float64))


def init_mlp(input_dim: int, output_dim: int, hidden_size: int, num_blocks: int,
             rng: np.random.Generator) -> MlpParams:
    """Uniform fan-in initialization; layer-norm gain 1 and bias 0."""
    parts = []
    for name, shape in segment_layout(input_dim, output_dim, hidden_size, num_blocks):
        if name.endswith("ln_g"):
            parts.append(np.ones(shape))
        elif name.endswith("ln_b"):
            parts.append(np.zeros(shape))
        else:
            fan_in = input_dim if name.startswith("in.") else hidden_size
            bound = 1.0 / np.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=shape))
    return MlpParams(input_dim, output_dim, hidden_size, num_blocks,
                     np.concatenate([p.ravel() for p in parts]))


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def forward(params: MlpParams, x: np.ndarray):
    """Batched forward pass. Returns ``(y, cache)``; ``cache`` feeds :func:`backward`."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {params.input_dim}")
    seg = params.segments()
    h = x @ seg["in.W"] + seg["in.b"]
    blocks = []
    for k in range(params.num_blocks):
        z1 = h @ seg[f"block{k}.W1"] + seg[f"block{k}.b1"]
        a1 = elu(z1)
        z2 = a1 @ seg[f"block{k}.W2"] + seg[f"block{k}.b2"]
        mu = z2.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(z2.var(axis=-1, keepdims=True) + LN_EPS)
        xhat = (z2 - mu) * inv_std
        blocks.append((h, z1, a1, xhat, inv_std))
        h = h + seg[f"block{k}.ln_g"] * xhat + seg[f"block{k}.ln_b"]
    y = h @ seg["out.W"] + seg["out.b"]
    cache = (x, blocks, h, squeeze)
    return (y[0] if squeeze else y), cache


def backward(params: MlpParams, cache, dy: np.ndarray):
    """Reverse pass for ``sum(y * dy)``. Returns ``(flat_param_grads, input_grads)``."""
    x, blocks, h_last, squeeze = cache
    dy = np.asarray(dy, dtype=np.float64)
    if squeeze:
        dy = dy[None, :]
    grads = np.zeros_like(params.values)
    seg = params.segments()
    gseg = params.segments(grads)

    gseg["out.W"][...] = h_last.T @ dy
    gseg["out.b"][...] = dy.sum(axis=0)
    dh = dy @ seg["out.W"].T
    for k in reversed(range(params.num_blocks)):
        h_in, z1, a1, xhat, inv_std = blocks[k]
        g = seg[f"block{k}.ln_g"]
        gseg[f"block{k}.ln_g"][...] = (dh * xhat).sum(axis=0)
        gseg[f"block{k}.ln_b"][...] = dh.sum(axis=0)
        dxhat = dh * g
        dz2 = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gseg[f"block{k}.W2"][...] = a1.T @ dz2
        gseg[f"block{k}.b2"][...] = dz2.sum(axis=0)
        dz1 = (dz2 @ seg[f"block{k}.W2"].T) * _elu_grad(z1)
        gseg[f"block{k}.W1"][...] = h_in.T @ dz1
        gseg[f"block{k}.b1"][...] = dz1.sum(axis=0)
        dh = dh + dz1 @ seg[f"block{k}.W1"].T
    gseg["in.W"][...] = x.T @ dh
    gseg["in.b"][...] = dh.sum(axis=0)
    dx = dh @ seg["in.W"].T
    return grads, (dx[0] if squeeze else dx)


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return forward(params, x)[0]


def backprop(params: MlpParams, x: np.ndarray, upstream_grad: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(mlp_forward(params, x) * upstream_grad)`` w.r.t. the parameters."""
    _, cache = forward(params, x)
    return backward(params, cache, upstream_grad)[0]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not np.all(np.isfinite(grads)):
        raise TrainingError("non-finite gradient passed to adam_step")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def write_weights(params: MlpParams, path: str | Path) -> None:
    header = _WEIGHT_HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, params.input_dim, params.output_dim,
                                 params.hidden_size, params.num_blocks, params.values.size)
    Path(path).write_bytes(header + params.values.astype("<f4").tobytes())


def read_weights(path: str | Path) -> MlpParams:
    raw = Path(path).read_bytes()
    magic, version, in_dim, out_dim, hidden, blocks, count = _WEIGHT_HEADER.unpack_from(raw)
    if magic != WEIGHT_MAGIC:
        raise ValueError(f"{path}: not a weight file (magic {magic!r})")
    if version != WEIGHT_VERSION:
        raise ValueError(f"{path}: unsupported weight-file version {version}")
    if count != param_count(in_dim, out_dim, hidden, blocks):
        raise ValueError(f"{path}: parameter count {count} does not match architecture")
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=_WEIGHT_HEADER.size)
    return MlpParams(in_dim, out_dim, hidden, blocks, values.astype(np.float64))
