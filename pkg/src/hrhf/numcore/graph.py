"""Static computation graphs with reverse-mode differentiation.

A :class:`Graph` is an append-only list of primitive applications.  Node ids
are list positions, so inputs always precede their consumers.  Values are
plain float64 numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np


class GraphError(ValueError):
    """Invalid graph construction or evaluation request."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"node {node}: {message}")
        self.node = node


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError, FloatingPointError):
    pass


class OpDef(NamedTuple):
    forward: Callable
    backward: Callable
    # Optional; returns an array describing which smooth piece the op is on.
    branch: Callable | None = None


_REGISTRY: dict[str, OpDef] = {}


def register_op(kind, forward, backward, branch=None):
    """Register a primitive.

    ``forward(values, attrs) -> array`` and
    ``backward(grad, values, out, attrs, needs) -> tuple`` where ``needs[i]``
    says whether the i-th input gradient is wanted (``None`` may be returned
    for the others).
    """
    if kind in _REGISTRY:
        raise GraphError(f"op kind {kind!r} already registered")
    _REGISTRY[kind] = OpDef(forward, backward, branch)


def op_def(kind):
    try:
        return _REGISTRY[kind]
    except KeyError:
        raise GraphError(f"unknown op kind {kind!r}") from None


def registered_ops():
    return sorted(_REGISTRY)


class Node(NamedTuple):
    kind: str
    inputs: tuple
    attrs: dict


def as_tensor(value):
    """Coerce to a finite float64 array."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


@dataclass
class Graph:
    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def apply(self, kind, *inputs, **attrs):
        if kind not in ("input", "const"):
            op_def(kind)
        for i in inputs:
            if not (isinstance(i, (int, np.integer)) and 0 <= i < len(self.nodes)):
                raise GraphError(f"{kind}: bad input reference {i!r}")
        self.nodes.append(Node(kind, tuple(int(i) for i in inputs), attrs))
        return len(self.nodes) - 1

    def input(self, name=None):
        return self.apply("input", name=name)

    def const(self, value):
        return self.apply("const", value=as_tensor(value))

    def leaves(self):
        return [i for i, n in enumerate(self.nodes) if n.kind == "input"]

    def __len__(self):
        return len(self.nodes)

    def __getattr__(self, kind):
        # g.relu(x), g.sum(x, axis=...) etc. for every registered op kind.
        if kind.startswith("_") or kind not in _REGISTRY:
            raise AttributeError(kind)
        return lambda *inputs, **attrs: self.apply(kind, *inputs, **attrs)


def _forward(graph, inputs, upto=None):
    n = len(graph.nodes) if upto is None else upto + 1
    values = [None] * n
    for i in range(n):
        node = graph.nodes[i]
        if node.kind == "input":
            if i not in inputs:
                raise GraphError("unbound input", i)
            val = np.asarray(inputs[i], dtype=np.float64)
        elif node.kind == "const":
            val = node.attrs["value"]
        else:
            args = [values[j] for j in node.inputs]
            try:
                val = _REGISTRY[node.kind].forward(args, node.attrs)
            except (ValueError, IndexError) as exc:
                raise ShapeError(f"{node.kind}: {exc}", i) from exc
        if not np.all(np.isfinite(val)):
            raise NonFiniteError(f"{node.kind} produced a non-finite value", i)
        values[i] = val
    return values


def evaluate(graph, inputs, outputs=None):
    """Forward values for ``outputs`` (default: ``graph.outputs`` or every node)."""
    if outputs is None:
        outputs = graph.outputs or range(len(graph.nodes))
    outputs = list(outputs)
    values = _forward(graph, inputs, max(outputs) if outputs else None)
    return {i: values[i] for i in outputs}


def _needs_grad(graph, wrt, upto):
    needs = [False] * (upto + 1)
    wrt = set(wrt)
    for i in range(upto + 1):
        node = graph.nodes[i]
        if node.kind == "input":
            needs[i] = i in wrt
        elif node.kind != "const":
            needs[i] = any(needs[j] for j in node.inputs)
    return needs


def value_and_grad(graph, inputs, seed, wrt=None, seed_grad=None):
    """Forward pass plus gradients of node ``seed`` w.r.t. leaves.

    Returns ``(values, grads)``: the list of all forward values up to ``seed``
    and a dict leaf-id -> gradient array.  ``seed_grad`` allows a
    vector-Jacobian product for non-scalar seeds.
    """
    if wrt is None:
        wrt = graph.leaves()
    values = _forward(graph, inputs, seed)
    out = values[seed]
    if seed_grad is None:
        if out.size != 1:
            raise GraphError(f"seed must be scalar, got shape {out.shape}", seed)
        seed_grad = np.ones_like(out)
    else:
        seed_grad = np.asarray(seed_grad, dtype=np.float64)
        if seed_grad.shape != out.shape:
            raise ShapeError("seed_grad shape mismatch", seed)
    needs = _needs_grad(graph, wrt, seed)
    grads = [None] * (seed + 1)
    grads[seed] = seed_grad
    for i in range(seed, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or not needs[i] or node.kind in ("input", "const"):
            continue
        args = [values[j] for j in node.inputs]
        want = tuple(needs[j] for j in node.inputs)
        in_grads = _REGISTRY[node.kind].backward(g, args, values[i], node.attrs, want)
        for j, w, gj in zip(node.inputs, want, in_grads):
            if not w or gj is None:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
        grads[i] = None
    result = {}
    for leaf in wrt:
        g = grads[leaf] if leaf <= seed else None
        result[leaf] = np.zeros_like(np.asarray(inputs[leaf], dtype=np.float64)) if g is None else g
    return values, result


def gradients(graph, inputs, seed, wrt=None, seed_grad=None):
    """d(seed)/d(leaf) for every leaf in ``wrt`` (default: all leaves)."""
    return value_and_grad(graph, inputs, seed, wrt, seed_grad)[1]


def branch_signature(graph, values):
    """Piece indicators of every non-smooth node, used to skip kinks."""
    sig = {}
    for i, node in enumerate(graph.nodes[: len(values)]):
        if node.kind in ("input", "const"):
            continue
        fn = _REGISTRY[node.kind].branch
        if fn is not None:
            piece = fn([values[j] for j in node.inputs], node.attrs)
            if piece is not None:
                sig[i] = piece
    return sig
