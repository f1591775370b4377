"""Static computation graphs with reverse-mode differentiation.

A :class:`Graph` is built once from input placeholders and primitive
applications, then evaluated any number of times with different bindings.
Nodes are appended in creation order, which is already a topological order,
so evaluation is a single forward sweep and backpropagation a single reverse
sweep.
"""

from __future__ import annotations

from typing import Any, Iterable, Mapping

import numpy as np

from ..errors import NumericError, ShapeError, UsageError
from .primitives import PRIMITIVES

ArrayLike = Any


class Node:
    """One vertex of a :class:`Graph`: an input, a constant or a primitive."""

    __slots__ = ("graph", "id", "kind", "parents", "attrs", "name", "requires_grad")

    def __init__(self, graph, id, kind, parents, attrs, name=None, requires_grad=False):
        self.graph = graph
        self.id = id
        self.kind = kind
        self.parents = parents
        self.attrs = attrs
        self.name = name
        self.requires_grad = requires_grad

    def describe(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"node #{self.id} [{self.kind}]{label}"

    def __repr__(self) -> str:
        return f"<Node {self.describe()}>"

    def __hash__(self) -> int:
        return hash((id(self.graph), self.id))

    def __eq__(self, other) -> bool:
        return self is other

    # arithmetic sugar; scalars and arrays are lifted to constants
    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __rtruediv__(self, other):
        return self.graph.div(other, self)

    def __neg__(self):
        return self.graph.neg(self)


class Graph:
    """Container of nodes plus the cached results of the latest evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._inputs: dict[str, Node] = {}
        self._values: list | None = None
        self._saved: list | None = None

    # ------------------------------------------------------------------ nodes
    def _append(self, kind, parents, attrs, name=None, requires_grad=False) -> Node:
        for p in parents:
            if p.graph is not self:
                raise UsageError(f"{p.describe()} belongs to a different graph")
        node = Node(self, len(self.nodes), kind, tuple(parents), attrs, name, requires_grad)
        self.nodes.append(node)
        self._values = None
        self._saved = None
        return node

    def input(self, name: str, requires_grad: bool = True) -> Node:
        """Declare a placeholder bound at evaluation time."""
        if name in self._inputs:
            raise UsageError(f"duplicate input name {name!r}")
        node = self._append("input", (), {}, name=name, requires_grad=requires_grad)
        self._inputs[name] = node
        return node

    def constant(self, value: ArrayLike, name: str | None = None) -> Node:
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        return self._append("const", (), {"value": arr}, name=name)

    def apply(self, kind: str, *parents, name: str | None = None, **attrs) -> Node:
        if kind not in PRIMITIVES:
            raise UsageError(f"unknown primitive {kind!r}")
        return self._append(kind, [self._lift(p) for p in parents], attrs, name=name)

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            return x
        return self.constant(x)

    @property
    def inputs(self) -> dict[str, Node]:
        return dict(self._inputs)

    def __getitem__(self, name: str) -> Node:
        return self._inputs[name]

    # --------------------------------------------------------------- builders
    def add(self, a, b, name=None):
        return self.apply("add", a, b, name=name)

    def sub(self, a, b, name=None):
        return self.apply("sub", a, b, name=name)

    def mul(self, a, b, name=None):
        return self.apply("mul", a, b, name=name)

    def div(self, a, b, name=None):
        return self.apply("div", a, b, name=name)

    def neg(self, a, name=None):
        return self.apply("neg", a, name=name)

    def linear(self, x, weight, bias=None, name=None):
        if bias is None:
            return self.apply("linear", x, weight, name=name)
        return self.apply("linear", x, weight, bias, name=name)

    def einsum(self, subscripts: str, a, b, name=None):
        return self.apply("einsum", a, b, subscripts=subscripts, name=name)

    def conv2d(self, x, weight, bias, name=None):
        return self.apply("conv2d", x, weight, bias, name=name)

    def masked_conv3d(self, x, weight, bias, out_mask: np.ndarray, name=None):
        return self.apply("masked_conv3d", x, weight, bias, out_mask=np.asarray(out_mask, bool), name=name)

    def relu(self, x, name=None):
        return self.apply("relu", x, name=name)

    def softplus(self, x, beta: float = 1.0, name=None):
        return self.apply("softplus", x, beta=float(beta), name=name)

    def sigmoid(self, x, beta: float = 1.0, name=None):
        return self.apply("sigmoid", x, beta=float(beta), name=name)

    def concat(self, xs: Iterable, axis: int = -1, name=None):
        return self.apply("concat", *xs, axis=axis, name=name)

    def stack(self, xs: Iterable, axis: int = 0, name=None):
        return self.apply("stack", *xs, axis=axis, name=name)

    def reshape(self, x, shape, name=None):
        return self.apply("reshape", x, shape=tuple(shape), name=name)

    def transpose(self, x, axes, name=None):
        return self.apply("transpose", x, axes=tuple(axes), name=name)

    def take(self, x, index, axis: int = 0, name=None):
        return self.apply("take", x, index=np.asarray(index), axis=axis, name=name)

    def broadcast_to(self, x, shape, name=None):
        return self.apply("broadcast_to", x, shape=tuple(shape), name=name)

    def sum(self, x, axis=None, keepdims: bool = False, name=None):
        return self.apply("sum", x, axis=axis, keepdims=keepdims, name=name)

    def mean(self, x, axis=None, keepdims: bool = False, name=None):
        return self.apply("mean", x, axis=axis, keepdims=keepdims, name=name)

    def var(self, x, axis=None, keepdims: bool = False, name=None):
        return self.apply("var", x, axis=axis, keepdims=keepdims, name=name)

    def softmax(self, x, axis: int = -1, name=None):
        return self.apply("softmax", x, axis=axis, name=name)

    def clamp(self, x, delta: float | None = None, lo: float | None = None, hi: float | None = None, name=None):
        if delta is not None:
            lo, hi = -float(delta), float(delta)
        if lo is None or hi is None or not lo < hi:
            raise UsageError("clamp needs lo < hi (or delta > 0)")
        return self.apply("clamp", x, lo=float(lo), hi=float(hi), name=name)

    def l2norm(self, x, axis: int = -1, name=None):
        return self.apply("l2norm", x, axis=axis, name=name)

    def bilinear(self, fmaps, uv, name=None):
        return self.apply("bilinear", fmaps, uv, name=name)

    def trilinear(self, grid, points, lo, hi, deriv_axis: int | None = None, name=None):
        return self.apply(
            "trilinear", grid, points,
            lo=np.asarray(lo, float), hi=np.asarray(hi, float), deriv_axis=deriv_axis, name=name,
        )

    def scatter_mean(self, values, voxel_index: np.ndarray, grid_shape, name=None):
        return self.apply(
            "scatter_mean", values, voxel_index=np.asarray(voxel_index, np.int64),
            grid_shape=tuple(grid_shape), name=name,
        )

    def rodrigues(self, rotvecs, name=None):
        return self.apply("rodrigues", rotvecs, name=name)

    def soft_silhouette(self, uv, faces: np.ndarray, size, tau: float, name=None):
        return self.apply(
            "soft_silhouette", uv, faces=np.asarray(faces, np.int64),
            size=tuple(size), tau=float(tau), name=name,
        )

    # ------------------------------------------------------------ evaluation
    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise UsageError("graph has not been evaluated")
        return self._values[node.id]

    @property
    def evaluated(self) -> bool:
        return self._values is not None


def _resolve_bindings(graph: Graph, bindings: Mapping) -> dict[int, np.ndarray]:
    bound: dict[int, np.ndarray] = {}
    for key, value in bindings.items():
        node = graph._inputs.get(key) if isinstance(key, str) else key
        if node is None or node.kind != "input" or node.graph is not graph:
            raise UsageError(f"binding key {key!r} is not an input of this graph")
        bound[node.id] = np.asarray(value, dtype=np.float64)
    missing = [n.name for n in graph._inputs.values() if n.id not in bound]
    if missing:
        raise UsageError(f"unbound graph inputs: {missing}")
    return bound


def evaluate(graph: Graph, bindings: Mapping) -> dict[Node, np.ndarray]:
    """Run the forward sweep; returns every node's value.

    ``bindings`` maps input nodes (or their names) to arrays. Values are cached
    on the graph for a subsequent :func:`backward`.
    """
    bound = _resolve_bindings(graph, bindings)
    values: list = [None] * len(graph.nodes)
    saved: list = [None] * len(graph.nodes)
    for node in graph.nodes:
        if node.kind == "input":
            out = bound[node.id]
        elif node.kind == "const":
            out = node.attrs["value"]
        else:
            prim = PRIMITIVES[node.kind]
            args = [values[p.id] for p in node.parents]
            try:
                out, saved[node.id] = prim.forward(node.attrs, *args)
            except ShapeError as exc:
                raise ShapeError(str(exc), node) from None
            except ValueError as exc:
                shapes = ", ".join(str(np.shape(a)) for a in args)
                raise ShapeError(f"{exc} (operand shapes {shapes})", node) from None
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite value", node)
        values[node.id] = out
    graph._values = values
    graph._saved = saved
    return {node: values[node.id] for node in graph.nodes}


def _reachable(graph: Graph, output: Node) -> list[bool]:
    """Nodes on some path from a differentiable input to ``output``."""
    live = [False] * len(graph.nodes)
    for node in graph.nodes:
        if node.kind == "input":
            live[node.id] = node.requires_grad
        else:
            live[node.id] = any(live[p.id] for p in node.parents)
    ancestor = [False] * len(graph.nodes)
    ancestor[output.id] = True
    for node in reversed(graph.nodes[: output.id + 1]):
        if ancestor[node.id]:
            for p in node.parents:
                ancestor[p.id] = True
    return [a and b for a, b in zip(live, ancestor)]


def backward(graph: Graph, output: Node, seed: ArrayLike | None = None) -> dict[Node, np.ndarray]:
    """Vector-Jacobian product of ``output`` with ``seed`` for every differentiable input.

    Gradients accumulate additively across fan-out. Inputs declared with
    ``requires_grad=False`` are skipped; inputs that do not influence the
    output receive zeros.
    """
    if graph._values is None:
        raise UsageError("backward called before evaluate")
    out_value = graph._values[output.id]
    if seed is None:
        if np.size(out_value) != 1:
            raise UsageError("seed is required for non-scalar outputs")
        seed = np.ones_like(out_value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != np.shape(out_value):
        raise ShapeError(f"seed shape {seed.shape} != output shape {np.shape(out_value)}", output)

    live = _reachable(graph, output)
    grads: list = [None] * len(graph.nodes)
    grads[output.id] = seed
    for node in reversed(graph.nodes[: output.id + 1]):
        g = grads[node.id]
        if g is None or not live[node.id] or node.kind in ("input", "const"):
            continue
        needs = [live[p.id] for p in node.parents]
        if not any(needs):
            continue
        prim = PRIMITIVES[node.kind]
        args = [graph._values[p.id] for p in node.parents]
        parent_grads = prim.vjp(node.attrs, graph._saved[node.id], g, args, needs)
        for p, need, pg in zip(node.parents, needs, parent_grads):
            if not need or pg is None:
                continue
            if grads[p.id] is None:
                grads[p.id] = pg
            else:
                grads[p.id] = grads[p.id] + pg
    result = {}
    for node in graph._inputs.values():
        if node.requires_grad:
            g = grads[node.id]
            result[node] = np.zeros_like(graph._values[node.id]) if g is None else g
    return result
