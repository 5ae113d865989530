"""Static computation graph with reverse-mode differentiation.

A :class:`Graph` is an append-only list of nodes; every node refers only to
earlier nodes, so insertion order is a topological order.  Tensors are plain
float32 numpy arrays.  ``forward`` fills ``graph.values``; ``backward`` walks
the nodes in reverse and returns one gradient per trainable parameter leaf.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import KERNELS, ShapeError

LEAF_OPS = ("input", "param", "const")


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Graph:
    """Builder plus storage for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.outputs: dict[str, int] = {}
        self.values: list[np.ndarray | None] = []
        self._ctx: list = []
        self._param_ids: dict[str, int] = {}
        self._input_ids: dict[str, int] = {}

    def _add(self, op, inputs=(), name=None, **attrs):
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"node input {i} does not reference an earlier node")
        node = Node(len(self.nodes), op, tuple(inputs), attrs, name)
        self.nodes.append(node)
        return node.id

    # leaves
    def input(self, name, shape=None):
        if name in self._input_ids:
            raise ValueError(f"duplicate input {name!r}")
        self._input_ids[name] = nid = self._add("input", name=name, shape=shape)
        return nid

    def param(self, name, shape):
        if name in self._param_ids:
            raise ValueError(f"duplicate parameter {name!r}")
        self._param_ids[name] = nid = self._add("param", name=name, shape=tuple(shape))
        return nid

    def const(self, value):
        return self._add("const", value=np.asarray(value, dtype=ops.DTYPE))

    @property
    def param_names(self):
        return list(self._param_ids)

    def param_shapes(self):
        return {n: self.nodes[i].attrs["shape"] for n, i in self._param_ids.items()}

    # primitives
    def identity(self, x):
        return self._add("identity", (x,))

    def add(self, a, b):
        return self._add("add", (a, b))

    def sub(self, a, b):
        return self._add("sub", (a, b))

    def mul(self, a, b):
        return self._add("mul", (a, b))

    def div(self, a, b):
        return self._add("div", (a, b))

    def scalar_mul(self, x, c):
        return self._add("scalar_mul", (x,), c=float(c))

    def tanh(self, x):
        return self._add("tanh", (x,))

    def sigmoid(self, x):
        return self._add("sigmoid", (x,))

    def dropout(self, x, rate):
        return self._add("dropout", (x,), rate=float(rate))

    def sum(self, x, axes=None, keepdims=False):
        axes = None if axes is None else tuple(axes)
        return self._add("sum", (x,), axes=axes, keepdims=keepdims)

    def reshape(self, x, shape):
        return self._add("reshape", (x,), shape=tuple(shape))

    def standardize(self, x, eps=1e-8):
        return self._add("standardize", (x,), eps=eps)

    def mse_loss(self, pred, target):
        return self._add("mse_loss", (pred, target))

    def dense(self, x, w, b=None):
        ins = (x, w) if b is None else (x, w, b)
        return self._add("dense", ins, has_bias=b is not None)

    def conv2d(self, x, w, b=None, stride=1, padding="same"):
        ins = (x, w) if b is None else (x, w, b)
        return self._add("conv2d", ins, stride=stride, padding=padding, has_bias=b is not None)

    def avg_pool2d(self, x, k=2):
        return self._add("avg_pool2d", (x,), k=k)

    def temporal_shift(self, x, frames, fraction):
        return self._add("temporal_shift", (x,), frames=frames, fraction=fraction)

    def output(self, name, nid):
        self.outputs[name] = nid
        return nid


def forward(graph, inputs, params, *, rng=None):
    """Evaluate every node.  ``rng`` switches dropout nodes into train mode."""
    tensors = getattr(params, "tensors", params)
    values = []
    ctx = []
    for node in graph.nodes:
        if node.op == "input":
            if node.name not in inputs:
                raise KeyError(f"node {node.id}: input {node.name!r} not bound")
            v = np.asarray(inputs[node.name], dtype=ops.DTYPE)
            want = node.attrs.get("shape")
            if want is not None and tuple(v.shape) != tuple(want):
                raise ShapeError(f"node {node.id} (input {node.name!r}): expected {tuple(want)}, got {v.shape}")
            values.append(v)
            ctx.append(None)
            continue
        if node.op == "param":
            if node.name not in tensors:
                raise KeyError(f"node {node.id}: parameter {node.name!r} missing")
            v = tensors[node.name]
            if v.shape != node.attrs["shape"]:
                raise ShapeError(f"node {node.id} (param {node.name!r}): expected {node.attrs['shape']}, got {v.shape}")
            values.append(v)
            ctx.append(None)
            continue
        if node.op == "const":
            values.append(node.attrs["value"])
            ctx.append(None)
            continue
        fwd, _ = KERNELS[node.op]
        attrs = node.attrs
        if node.op == "dropout":
            attrs = dict(attrs, _rng=rng)
        try:
            out, c = fwd([values[i] for i in node.inputs], attrs)
        except ShapeError as exc:
            raise ShapeError(f"node {node.id} ({node.op}): {exc}") from None
        values.append(out)
        ctx.append(c)
    graph.values = values
    graph._ctx = ctx
    return {name: values[nid] for name, nid in graph.outputs.items()}


def backward(graph, loss, trainable=None):
    """Gradients of scalar node ``loss`` w.r.t. every (trainable) parameter leaf.

    ``loss`` may be a node id or an output name.  Parameters excluded by
    ``trainable`` get no entry; unused trainable parameters get zeros.
    """
    if isinstance(loss, str):
        loss = graph.outputs[loss]
    if not graph.values or len(graph.values) != len(graph.nodes):
        raise RuntimeError("backward called before forward")
    if graph.values[loss].size != 1:
        raise ValueError(f"loss node {loss} is not scalar (shape {graph.values[loss].shape})")
    wanted = {n for n in graph._param_ids if trainable is None or n in trainable}

    needs = [False] * len(graph.nodes)
    for node in graph.nodes:
        if node.op == "param":
            needs[node.id] = node.name in wanted
        elif node.op not in LEAF_OPS:
            needs[node.id] = any(needs[i] for i in node.inputs)

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[loss] = np.ones_like(graph.values[loss])
    for node in reversed(graph.nodes[: loss + 1]):
        g = grads[node.id]
        if g is None or node.op in LEAF_OPS or not needs[node.id]:
            continue
        _, bwd = KERNELS[node.op]
        in_grads = bwd(g, graph._ctx[node.id], node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not needs[i]:
                continue
            gi = np.asarray(gi, dtype=ops.DTYPE)
            grads[i] = gi if grads[i] is None else grads[i] + gi

    out = {}
    for name in wanted:
        nid = graph._param_ids[name]
        g = grads[nid]
        out[name] = np.zeros(graph.nodes[nid].attrs["shape"], dtype=ops.DTYPE) if g is None else g
    return out
