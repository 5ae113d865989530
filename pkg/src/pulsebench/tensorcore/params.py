"""Parameter containers, initialization, optimizers and checkpoint I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ops import DTYPE

MAGIC = b"PBPARAM1"


@dataclass(frozen=True)
class ModelParams:
    """Named float32 tensors plus the set of leaves excluded from training.

    ``role`` is informational: ``global``, ``personalized`` or ``updated``.
    Values are never mutated in place; updates return a new instance.
    """

    tensors: dict
    frozen: frozenset = frozenset()
    role: str = "global"

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    @property
    def trainable(self):
        return [n for n in self.tensors if n not in self.frozen]

    def with_tensors(self, tensors, role=None):
        return replace(self, tensors=tensors, role=role or self.role)

    def freeze(self, names):
        return replace(self, frozen=self.frozen | frozenset(names))

    def copy(self):
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})

    def equals(self, other):
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


def glorot_uniform(rng, shape):
    if len(shape) == 4:
        # [k, k, in, out]
        receptive = shape[0] * shape[1]
        fan_in, fan_out = shape[2] * receptive, shape[3] * receptive
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        return np.zeros(shape, dtype=DTYPE)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def init_params(shapes, seed):
    """Glorot-uniform weights (rank 2 and 4), zero biases; iteration order fixed by ``shapes``."""
    rng = np.random.default_rng(seed)
    return ModelParams({name: glorot_uniform(rng, tuple(s)) for name, s in shapes.items()})


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


def optimizer_step(params, grads, state):
    """Return updated params; ``state`` is advanced in place.

    Frozen leaves are copied through untouched.  A trainable leaf without a
    gradient is an error.
    """
    new = {}
    if state.kind == "adam":
        state.step += 1
        b1, b2 = state.beta1, state.beta2
        c1 = 1 - b1 ** state.step
        c2 = 1 - b2 ** state.step
    for name, p in params.tensors.items():
        if name in params.frozen:
            new[name] = p
            continue
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if state.kind == "sgd":
            new[name] = (p - DTYPE(state.lr) * g).astype(DTYPE)
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = (DTYPE(b1) * m + DTYPE(1 - b1) * g).astype(DTYPE)
        v = (DTYPE(b2) * v + DTYPE(1 - b2) * g * g).astype(DTYPE)
        state.m[name], state.v[name] = m, v
        mhat = m / DTYPE(c1)
        vhat = v / DTYPE(c2)
        new[name] = (p - DTYPE(state.lr) * mhat / (np.sqrt(vhat) + DTYPE(state.eps))).astype(DTYPE)
    return params.with_tensors(new)


def save_params(params, path):
    """Little-endian: magic, u32 count, then per tensor u32 name length, name,
    u32 rank, u32 dims, float32 payload."""
    tensors = params.tensors if isinstance(params, ModelParams) else params
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    pos = 8
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        tensors[name] = arr.astype(DTYPE)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return ModelParams(tensors)
