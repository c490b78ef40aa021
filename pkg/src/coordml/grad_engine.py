"""Small reverse-mode autodiff engine over dense float64 arrays.

A :class:`Tape` is a static graph: nodes are recorded once (inputs, parameters
and primitive ops) and can then be evaluated many times with different input
batches. After a forward pass the activations stay cached on the tape so that
:func:`backward` can walk the nodes in reverse order.

Tensors are plain ``numpy.ndarray`` objects with dtype float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GraphError(RuntimeError):
    pass


@dataclass
class _Node:
    op: str
    args: tuple[int, ...] = ()
    name: str | None = None
    const: float = 0.0
    shape: tuple | None = None  # declared shape for inputs, None entries are free
    value: Tensor | None = None
    mask: Tensor | None = None


@dataclass
class Tape:
    """Recorded computation graph plus its parameter store."""

    seed: int = 0
    nodes: list[_Node] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)
    outputs: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)
        self._param_ids: dict[str, int] = {}
        self._input_ids: dict[str, int] = {}
        self._evaluated = False

    # -- graph construction -------------------------------------------------

    def _push(self, node: _Node) -> int:
        self.nodes.append(node)
        self._evaluated = False
        return len(self.nodes) - 1

    def input(self, name: str, shape: tuple | None = None) -> int:
        if name in self._input_ids:
            raise GraphError(f"duplicate input {name!r}")
        nid = self._push(_Node("input", name=name, shape=shape))
        self._input_ids[name] = nid
        return nid

    def param(self, name: str, value) -> int:
        if name in self._param_ids:
            raise GraphError(f"duplicate parameter {name!r}")
        self.params[name] = np.array(value, dtype=np.float64)
        nid = self._push(_Node("param", name=name))
        self._param_ids[name] = nid
        return nid

    def output(self, name: str, nid: int) -> int:
        self.outputs[name] = nid
        return nid

    def matmul(self, a: int, b: int) -> int:
        return self._push(_Node("matmul", (a, b)))

    def add(self, a: int, b: int) -> int:
        return self._push(_Node("add", (a, b)))

    def sub(self, a: int, b: int) -> int:
        return self._push(_Node("sub", (a, b)))

    def mul(self, a: int, b: int) -> int:
        return self._push(_Node("mul", (a, b)))

    def relu(self, a: int) -> int:
        return self._push(_Node("relu", (a,)))

    def abs(self, a: int) -> int:
        return self._push(_Node("abs", (a,)))

    def square(self, a: int) -> int:
        return self._push(_Node("square", (a,)))

    def mean(self, a: int) -> int:
        return self._push(_Node("mean", (a,)))

    def scale(self, a: int, c: float) -> int:
        return self._push(_Node("scale", (a,), const=float(c)))

    def dropout(self, a: int, keep_prob: float) -> int:
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
        return self._push(_Node("dropout", (a,), const=float(keep_prob)))

    def combine(self, terms: list[tuple[float, int]]) -> int:
        """Weighted sum ``sum(c * node)`` built from scale and add nodes."""
        out = None
        for c, nid in terms:
            s = self.scale(nid, c)
            out = s if out is None else self.add(out, s)
        if out is None:
            raise GraphError("combine needs at least one term")
        return out

    def value(self, nid: int) -> Tensor:
        v = self.nodes[nid].value
        if v is None:
            raise GraphError("node has not been evaluated")
        return v

    # -- evaluation ------------------------------------------------------------

    def forward(self, inputs: Mapping[str, Tensor], train: bool = False) -> dict[str, Tensor]:
        for name, nid in self._input_ids.items():
            if name not in inputs:
                raise GraphError(f"missing input {name!r}")
            x = np.asarray(inputs[name], dtype=np.float64)
            decl = self.nodes[nid].shape
            if decl is not None and (
                len(decl) != x.ndim or any(d is not None and d != s for d, s in zip(decl, x.shape))
            ):
                raise ShapeError(f"input {name!r}", decl, x.shape)
            self.nodes[nid].value = x
        for node in self.nodes:
            op = node.op
            if op == "input":
                continue
            if op == "param":
                node.value = self.params[node.name]
                continue
            a = self.nodes[node.args[0]].value
            if op == "matmul":
                b = self.nodes[node.args[1]].value
                if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                    raise ShapeError("matmul", a.shape, b.shape)
                node.value = a @ b
            elif op in ("add", "sub", "mul"):
                b = self.nodes[node.args[1]].value
                try:
                    out_shape = np.broadcast_shapes(a.shape, b.shape)
                except ValueError:
                    raise ShapeError(op, a.shape, b.shape) from None
                if out_shape != a.shape and out_shape != b.shape:
                    raise ShapeError(op, a.shape, b.shape)
                node.value = a + b if op == "add" else (a - b if op == "sub" else a * b)
            elif op == "relu":
                node.value = np.maximum(a, 0.0)
            elif op == "abs":
                node.value = np.abs(a)
            elif op == "square":
                node.value = a * a
            elif op == "mean":
                node.value = np.asarray(a.mean())
            elif op == "scale":
                node.value = node.const * a
            elif op == "dropout":
                if train and node.const < 1.0:
                    node.mask = (self._rng.random(a.shape) < node.const) / node.const
                    node.value = a * node.mask
                else:
                    node.mask = None
                    node.value = a
            else:  # pragma: no cover
                raise GraphError(f"unknown op {op}")
        self._evaluated = True
        return {name: self.nodes[nid].value for name, nid in self.outputs.items()}

    def backward(self, out: int) -> dict[str, Tensor]:
        if not self._evaluated:
            raise GraphError("backward called before forward")
        root = self.nodes[out].value
        if root is None or np.ndim(root) != 0:
            raise GraphError(f"backward needs a scalar output, got shape {np.shape(root)}")
        grads: list[Tensor | None] = [None] * len(self.nodes)
        grads[out] = np.ones((), dtype=np.float64)
        for nid in range(out, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            op = node.op
            if op in ("input", "param"):
                continue
            args = node.args
            a = self.nodes[args[0]].value
            if op == "matmul":
                b = self.nodes[args[1]].value
                _acc(grads, args[0], g @ b.T)
                _acc(grads, args[1], a.T @ g)
            elif op == "add":
                _acc(grads, args[0], _unbroadcast(g, a.shape))
                _acc(grads, args[1], _unbroadcast(g, self.nodes[args[1]].value.shape))
            elif op == "sub":
                _acc(grads, args[0], _unbroadcast(g, a.shape))
                _acc(grads, args[1], _unbroadcast(-g, self.nodes[args[1]].value.shape))
            elif op == "mul":
                b = self.nodes[args[1]].value
                _acc(grads, args[0], _unbroadcast(g * b, a.shape))
                _acc(grads, args[1], _unbroadcast(g * a, b.shape))
            elif op == "relu":
                _acc(grads, args[0], g * (a > 0.0))
            elif op == "abs":
                # subgradient 0 at the kink
                _acc(grads, args[0], g * np.sign(a))
            elif op == "square":
                _acc(grads, args[0], 2.0 * a * g)
            elif op == "mean":
                _acc(grads, args[0], np.full(a.shape, g / a.size))
            elif op == "scale":
                _acc(grads, args[0], node.const * g)
            elif op == "dropout":
                _acc(grads, args[0], g if node.mask is None else g * node.mask)
        return {
            name: (grads[nid] if grads[nid] is not None else np.zeros_like(self.params[name]))
            for name, nid in self._param_ids.items()
        }


def _acc(grads: list, nid: int, g: Tensor) -> None:
    cur = grads[nid]
    grads[nid] = g if cur is None else cur + g


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def forward(tape: Tape, inputs: Mapping[str, Tensor], train: bool = False) -> dict[str, Tensor]:
    """Evaluate every node of ``tape`` and return its named outputs."""
    return tape.forward(inputs, train=train)


def backward(tape: Tape, scalar_output: int) -> dict[str, Tensor]:
    """Gradients of a scalar node with respect to every parameter of ``tape``."""
    return tape.backward(scalar_output)


def global_norm(grads: Mapping[str, Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, Tensor], max_norm: float) -> dict[str, Tensor]:
    """Rescale ``grads`` jointly so that their global l2 norm is at most ``max_norm``."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    # slack of a few ulps keeps the op idempotent
    if norm <= max_norm * (1.0 + 1e-12):
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}
