"""Tape-based reverse-mode differentiation over the operators in ``functional``.

A :class:`Graph` records every node in execution order, so the recording order
is already a topological order and :meth:`Graph.backward` only has to walk the
tape in reverse. Each op helper below computes its forward value eagerly and
stores a closure that maps the output gradient to input gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from rapnet.tensorops import functional as fn

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

SUPPORTED_OPS = frozenset(
    {
        "input",
        "conv2d",
        "maxpool",
        "relu",
        "softplus",
        "batchnorm",
        "upsample_nearest",
        "pad_to_even",
        "crop",
        "concat",
        "l2_normalize",
        "add",
        "sub",
        "mul",
        "div",
        "scale",
        "shift",
        "exp",
        "square",
        "sum",
        "mean",
        "max",
        "distance",
        "weighted_sum",
    }
)


class UnsupportedOperator(RuntimeError):
    pass


class Node:
    __slots__ = ("graph", "index", "value", "op", "parents", "backward_fn", "name", "trainable")

    def __init__(self, graph, index, value, op, parents, backward_fn, name=None, trainable=False):
        self.graph = graph
        self.index = index
        self.value = value
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.index}, op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Node) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Node) else shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Node) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Node) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)


class Graph:
    """Records nodes and back-propagates scalar outputs to trainable parameters."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []

    def record(self, op: str, value: np.ndarray, parents: Sequence[Node] = (), backward_fn: BackwardFn | None = None) -> Node:
        value = np.asarray(value, dtype=self.dtype)
        fn.check_finite(value, op)
        for p in parents:
            if p.graph is not self:
                raise ValueError(f"{op}: input node belongs to a different graph")
        node = Node(self, len(self.nodes), value, op, tuple(parents), backward_fn)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.record("input", np.asarray(value))

    def parameter(self, value, name: str) -> Node:
        node = self.record("input", np.array(value, dtype=self.dtype))
        node.name = name
        node.trainable = True
        return node

    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.trainable]

    def backward(self, output: Node) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``output`` w.r.t. every trainable parameter, keyed by name."""
        if output.graph is not self:
            raise ValueError("output node belongs to a different graph")
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[output.index] = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads[node.index]
            if g is None or not node.parents:
                continue
            if node.op not in SUPPORTED_OPS or node.backward_fn is None:
                raise UnsupportedOperator(f"cannot differentiate through operator {node.op!r}")
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                pg = np.asarray(pg, dtype=self.dtype).reshape(parent.shape)
                grads[parent.index] = pg if grads[parent.index] is None else grads[parent.index] + pg
        out = {}
        for node in self.parameters():
            g = grads[node.index]
            out[node.name] = np.zeros_like(node.value) if g is None else g
        return out


# ------------------------------------------------------------------ layer ops


def conv2d(x: Node, weight: Node, bias: Node | None = None, stride: int = 1, padding: int = 0) -> Node:
    b = None if bias is None else bias.value
    value = fn.conv2d(x.value, weight.value, b, stride, padding)

    def backward(g):
        gx, gw, gb = fn.conv2d_backward(g, x.value, weight.value, stride, padding)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return x.graph.record("conv2d", value, parents, backward)


def maxpool(x: Node, k: int, stride: int, padding: int = 0) -> Node:
    value = fn.maxpool(x.value, k, stride, padding)
    return x.graph.record("maxpool", value, (x,), lambda g: (fn.maxpool_backward(g, x.value, k, stride, padding),))


def activate(x: Node, kind: str) -> Node:
    value = fn.activate(x.value, kind)
    return x.graph.record(kind, value, (x,), lambda g: (fn.activate_backward(g, x.value, kind),))


def batchnorm(
    x: Node, scale_: Node, shift_: Node, mode: str, stats: fn.BatchNormStats, eps: float = fn.BN_EPS
) -> tuple[Node, fn.BatchNormStats]:
    value, new_stats = fn.batchnorm(x.value, scale_.value, shift_.value, mode, stats, eps)

    def backward(g):
        return fn.batchnorm_backward(g, x.value, scale_.value, mode, stats, eps)

    return x.graph.record("batchnorm", value, (x, scale_, shift_), backward), new_stats


def upsample_nearest(x: Node) -> Node:
    return x.graph.record(
        "upsample_nearest", fn.upsample_nearest(x.value), (x,), lambda g: (fn.upsample_nearest_backward(g),)
    )


def pad_to_even(x: Node) -> Node:
    shape = x.shape
    return x.graph.record("pad_to_even", fn.pad_to_even(x.value), (x,), lambda g: (fn.pad_to_even_backward(g, shape),))


def crop(x: Node, h: int, w: int) -> Node:
    """Keep the top-left ``h x w`` window of a rank-3 node."""

    def backward(g):
        full = np.zeros(x.shape)
        full[:, :h, :w] = g
        return (full,)

    return x.graph.record("crop", x.value[:, :h, :w], (x,), backward)


def concat(nodes: Sequence[Node]) -> Node:
    """Concatenate rank-3 nodes along the channel axis."""
    sizes = [n.shape[0] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[a:b] for a, b in zip(bounds[:-1], bounds[1:]))

    return nodes[0].graph.record("concat", np.concatenate([n.value for n in nodes], axis=0), nodes, backward)


def l2_normalize(v: Node, floor: float = fn.NORM_FLOOR) -> Node:
    value = fn.l2_normalize(v.value, floor)
    return v.graph.record("l2_normalize", value, (v,), lambda g: (fn.l2_normalize_backward(g, v.value),))


# ----------------------------------------------------------------- arithmetic


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape and b.value.size != 1:
        raise fn.ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _reduce_like(g: np.ndarray, node: Node) -> np.ndarray:
    return g if g.shape == node.shape else np.asarray(g.sum()).reshape(node.shape)


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return a.graph.record("add", a.value + b.value, (a, b), lambda g: (g, _reduce_like(g, b)))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return a.graph.record("sub", a.value - b.value, (a, b), lambda g: (g, -_reduce_like(g, b)))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    return a.graph.record(
        "mul", a.value * b.value, (a, b), lambda g: (g * b.value, _reduce_like(g * a.value, b))
    )


def div(a: Node, b: Node) -> Node:
    """Elementwise ``a / b``; ``b`` may also be a scalar node."""
    _same_shape("div", a, b)
    if np.any(b.value == 0):
        raise ZeroDivisionError("div: zero denominator")

    def backward(g):
        return g / b.value, _reduce_like(-g * a.value / (b.value * b.value), b)

    return a.graph.record("div", a.value / b.value, (a, b), backward)


def scale(a: Node, c: float) -> Node:
    return a.graph.record("scale", a.value * c, (a,), lambda g: (g * c,))


def shift(a: Node, c: float) -> Node:
    return a.graph.record("shift", a.value + c, (a,), lambda g: (g,))


def exp(a: Node) -> Node:
    value = np.exp(a.value)
    return a.graph.record("exp", value, (a,), lambda g: (g * value,))


def square(a: Node) -> Node:
    return a.graph.record("square", a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def sum_(a: Node) -> Node:
    return a.graph.record("sum", np.sum(a.value), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Node) -> Node:
    n = a.value.size
    return a.graph.record("mean", np.mean(a.value), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def max_(a: Node) -> Node:
    """Global maximum; the gradient goes to the first maximal element in row-major order."""
    idx = int(np.argmax(a.value))

    def backward(g):
        out = np.zeros(a.value.size)
        out[idx] = float(g)
        return (out,)

    return a.graph.record("max", a.value.reshape(-1)[idx], (a,), backward)


def distance(a: Node, b: Node) -> Node:
    """Euclidean distance between two vectors (subgradient 0 where they coincide)."""
    if a.shape != b.shape:
        raise fn.ShapeError(f"distance: shapes {a.shape} and {b.shape} differ")
    diff = a.value - b.value
    d = float(np.sqrt(np.sum(diff * diff)))

    def backward(g):
        unit = diff / d if d > 0 else np.zeros_like(diff)
        return float(g) * unit, -float(g) * unit

    return a.graph.record("distance", d, (a, b), backward)


def weighted_sum(features: Node, weights: Node) -> Node:
    """``sum_{i,j} weights[0, i, j] * features[:, i, j]`` for a (C,H,W) map and (1,H,W) weights."""
    if features.shape[1:] != weights.shape[1:] or weights.shape[0] != 1:
        raise fn.ShapeError(f"weighted_sum: features {features.shape} vs weights {weights.shape}")
    f, w = features.value, weights.value
    value = np.tensordot(f, w[0], axes=([1, 2], [0, 1]))

    def backward(g):
        return g[:, None, None] * w, np.tensordot(g, f, axes=(0, 0))[None]

    return features.graph.record("weighted_sum", value, (features, weights), backward)
