"""Dense float64 tensors and a small define-by-run reverse-mode engine.

Tensors are plain read-only ``numpy`` arrays of dtype float64. A :class:`Graph`
records every primitive applied while a model runs forward; calling
:meth:`Graph.backward` walks the record once in reverse and accumulates
gradients into the :class:`Parameter` objects that took part.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Copy ``x`` into an immutable float64 array, rejecting NaN/Inf."""
    arr = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Parameter:
    """A named trainable tensor with a gradient buffer of the same shape.

    ``norm_axis`` marks a weight as max-norm constrained: the L2 norm over that
    axis is the norm of one unit's incoming weights.
    """

    def __init__(self, name: str, value, norm_axis: int | None = None):
        self.name = name
        self.norm_axis = norm_axis
        self._value = as_tensor(value, name)
        self.grad = np.zeros_like(self._value)

    @property
    def value(self) -> np.ndarray:
        return self._value

    @value.setter
    def value(self, new) -> None:
        new = as_tensor(new, self.name)
        if new.shape != self._value.shape:
            raise ShapeError(f"parameter {self.name}: shape {new.shape} != {self._value.shape}")
        self._value = new

    @property
    def shape(self) -> tuple[int, ...]:
        return self._value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self._value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # backward(grad_out, out, inputs, **attrs) -> one gradient per input
    backward: Callable[..., Sequence[np.ndarray]]
    check: Callable[..., None] | None = None
    arity: int | None = None


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, forward, backward, check=None, arity=None):
    PRIMITIVES[name] = Primitive(name, forward, backward, check, arity)


def _mismatch(kind, *shapes):
    return ShapeError(f"{kind}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def _same_shape(kind):
    def check(a, b, **_):
        if a.shape != b.shape:
            raise _mismatch(kind, a.shape, b.shape)
    return check


def _trailing(kind):
    # x [N, *s] against v [*s]
    def check(x, v, **_):
        if x.ndim < 1 or x.shape[1:] != v.shape:
            raise _mismatch(kind, x.shape, v.shape)
    return check


def _check_matmul(a, b, **_):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _mismatch("matmul", a.shape, b.shape)


def _check_linear(x, w, **_):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise _mismatch("linear", x.shape, w.shape)


def _check_concat(*xs, axis=1):
    if not xs:
        raise ShapeError("concat: no inputs")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            x.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise _mismatch("concat", *(y.shape for y in xs))


def _check_slice(x, start, stop, axis=1):
    if not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeError(f"slice: [{start}:{stop}] outside axis of extent {x.shape[axis]}")


def _check_reshape(x, shape):
    if int(np.prod(shape)) != x.size:
        raise _mismatch("reshape", x.shape, tuple(shape))


def _check_transpose(x, **_):
    if x.ndim != 2:
        raise ShapeError(f"transpose: needs a matrix, got {x.shape}")


def _check_bce(a, y, **_):
    if a.shape != y.shape or a.ndim != 2:
        raise _mismatch("bce", a.shape, y.shape)


def _check_max(x, **_):
    if x.ndim < 2 or x.shape[-1] < 1:
        raise ShapeError(f"max_pieces: needs a trailing pieces axis, got {x.shape}")


def _check_reduce0(x, **_):
    if x.ndim < 1 or x.shape[0] < 1:
        raise ShapeError(f"batch reduction on empty shape {x.shape}")


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softmax(a, axis):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _max_backward(g, out, xs):
    (x,) = xs
    idx = np.argmax(x, axis=-1)  # lowest index on ties
    dx = np.zeros_like(x)
    np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
    return (dx,)


def _concat_backward(g, out, xs, axis=1):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _slice_backward(g, out, xs, start, stop, axis=1):
    (x,) = xs
    dx = np.zeros_like(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    dx[tuple(index)] = g
    return (dx,)


def _slice_forward(x, start, stop, axis=1):
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)]


def _var0_backward(g, out, xs):
    (x,) = xs
    n = x.shape[0]
    return (2.0 * (x - x.mean(axis=0)) * g / n,)


def _bce_logits(a, y):
    # mean over samples of summed per-label losses
    loss = np.logaddexp(0.0, a) - y * a
    return np.asarray(loss.sum() / a.shape[0])


def _bce_logits_backward(g, out, xs):
    a, y = xs
    return (g * (_sigmoid(a) - y) / a.shape[0], np.zeros_like(y))


def _bce_probs(p, y, eps=1e-12):
    q = np.clip(p, eps, 1.0 - eps)
    loss = -(y * np.log(q) + (1.0 - y) * np.log(1.0 - q))
    return np.asarray(loss.sum() / p.shape[0])


def _bce_probs_backward(g, out, xs, eps=1e-12):
    p, y = xs
    q = np.clip(p, eps, 1.0 - eps)
    d = (q - y) / (q * (1.0 - q))
    d = np.where((p > eps) & (p < 1.0 - eps), d, 0.0)
    return (g * d / p.shape[0], np.zeros_like(y))


_register("add", np.add, lambda g, o, xs: (g, g), _same_shape("add"), 2)
_register("sub", np.subtract, lambda g, o, xs: (g, -g), _same_shape("sub"), 2)
_register("mul", np.multiply, lambda g, o, xs: (g * xs[1], g * xs[0]), _same_shape("mul"), 2)
_register("neg", np.negative, lambda g, o, xs: (-g,), arity=1)
_register("matmul", np.matmul, lambda g, o, xs: (g @ xs[1].T, xs[0].T @ g), _check_matmul, 2)
# x [N, d] @ W.T for W [out, d]: the usual weight layout (one row per unit)
_register(
    "linear",
    lambda x, w: x @ w.T,
    lambda g, o, xs: (g @ xs[1], g.T @ xs[0]),
    _check_linear,
    2,
)
_register(
    "transpose",
    lambda x: x.T,
    lambda g, o, xs: (g.T,),
    _check_transpose,
    1,
)
_register("bias_add", np.add, lambda g, o, xs: (g, g.sum(axis=0)), _trailing("bias_add"), 2)
_register(
    "col_scale",
    np.multiply,
    lambda g, o, xs: (g * xs[1], (g * xs[0]).sum(axis=0)),
    _trailing("col_scale"),
    2,
)
_register("tanh", np.tanh, lambda g, o, xs: (g * (1.0 - o * o),), arity=1)
_register("sigmoid", _sigmoid, lambda g, o, xs: (g * o * (1.0 - o),), arity=1)
_register(
    "softmax",
    lambda x, axis=-1: _softmax(x, axis),
    lambda g, o, xs, axis=-1: (o * (g - (g * o).sum(axis=axis, keepdims=True)),),
    arity=1,
)
_register("concat", lambda *xs, axis=1: np.concatenate(xs, axis=axis), _concat_backward, _check_concat)
_register("slice", _slice_forward, _slice_backward, _check_slice, 1)
_register(
    "reshape",
    lambda x, shape: x.reshape(shape),
    lambda g, o, xs, shape: (g.reshape(xs[0].shape),),
    _check_reshape,
    1,
)
_register(
    "broadcast_last",
    lambda x, n: np.repeat(x[..., None], n, axis=-1),
    lambda g, o, xs, n: (g.sum(axis=-1),),
    arity=1,
)
_register(
    "sum_axis",
    lambda x, axis: x.sum(axis=axis),
    lambda g, o, xs, axis: (np.broadcast_to(np.expand_dims(g, axis), xs[0].shape).copy(),),
    arity=1,
)
_register("max_pieces", lambda x: x.max(axis=-1), _max_backward, _check_max, 1)
_register(
    "mean0",
    lambda x: x.mean(axis=0),
    lambda g, o, xs: (np.broadcast_to(g / xs[0].shape[0], xs[0].shape).copy(),),
    _check_reduce0,
    1,
)
_register("var0", lambda x: x.var(axis=0), _var0_backward, _check_reduce0, 1)
_register(
    "rsqrt",
    lambda x, eps=0.0: 1.0 / np.sqrt(x + eps),
    lambda g, o, xs, eps=0.0: (-0.5 * g * o ** 3,),
    arity=1,
)
_register("sum", lambda x: np.asarray(x.sum()), lambda g, o, xs: (np.full_like(xs[0], g),), arity=1)
_register(
    "mean",
    lambda x: np.asarray(x.mean()),
    lambda g, o, xs: (np.full_like(xs[0], g / xs[0].size),),
    arity=1,
)
_register("bce_logits", _bce_logits, _bce_logits_backward, _check_bce, 2)
_register("bce_probs", _bce_probs, _bce_probs_backward, _check_bce, 2)


def _lookup(kind: str) -> Primitive:
    try:
        return PRIMITIVES[kind]
    except KeyError:
        raise GraphError(f"unknown primitive {kind!r}") from None


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> np.ndarray:
    """Evaluate one primitive on plain arrays, outside any graph."""
    prim = _lookup(kind)
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    if prim.arity is not None and len(arrays) != prim.arity:
        raise GraphError(f"{kind}: expected {prim.arity} inputs, got {len(arrays)}")
    if prim.check is not None:
        prim.check(*arrays, **attrs)
    return _frozen(prim.forward(*arrays, **attrs))


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Node:
    graph: "Graph"
    id: int
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    param: Parameter | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.graph.constant(
            np.broadcast_to(np.asarray(other, dtype=np.float64), self.shape)
        )

    def __add__(self, other):
        return self.graph.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.graph.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.apply("mul", self._lift(other), self)

    def __neg__(self):
        return self.graph.apply("neg", self)

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, other)

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.kind}, shape={self.shape})"


class Graph:
    """Record of primitive applications, built fresh for every forward pass.

    Nodes are appended as they are created, so the list order is already a
    topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Parameter] = {}
        self._param_nodes: dict[int, Node] = {}
        self._grads: dict[int, np.ndarray] | None = None

    def _add(self, kind, inputs, value, attrs=None, param=None) -> Node:
        node = Node(self, len(self.nodes), kind, tuple(inputs), value, attrs or {}, param)
        self.nodes.append(node)
        return node

    def constant(self, value, name: str = "constant") -> Node:
        return self._add("constant", (), as_tensor(value, name))

    def param(self, p: Parameter) -> Node:
        """Leaf node for a parameter; one node per parameter per graph."""
        node = self._param_nodes.get(id(p))
        if node is None:
            if p.name in self.parameters and self.parameters[p.name] is not p:
                raise GraphError(f"two different parameters named {p.name!r}")
            self.parameters[p.name] = p
            node = self._add("parameter", (), p.value, param=p)
            self._param_nodes[id(p)] = node
        return node

    def apply(self, kind: str, *inputs: Node, **attrs) -> Node:
        for x in inputs:
            if not isinstance(x, Node) or x.graph is not self:
                raise GraphError(f"{kind}: inputs must be nodes of this graph")
        value = apply_primitive(kind, [x.value for x in inputs], **attrs)
        return self._add(kind, [x.id for x in inputs], value, attrs)

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(parameter) into every ``Parameter.grad``.

        Returns the gradient of every node that influences ``loss`` keyed by
        node id, so input gradients are available on request.
        """
        if loss.graph is not self or loss.id >= len(self.nodes) or self.nodes[loss.id] is not loss:
            raise GraphError("loss node was not evaluated in this graph")
        if loss.value.size != 1:
            raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id)
            if g is None:
                continue
            if node.param is not None:
                node.param.grad = node.param.grad + g
            if not node.inputs:
                continue
            prim = PRIMITIVES[node.kind]
            xs = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, prim.backward(g, node.value, xs, **node.attrs)):
                grads[i] = grads[i] + gi if i in grads else np.asarray(gi, dtype=np.float64)
        self._grads = grads
        return grads

    def grad_of(self, node: Node) -> np.ndarray:
        if self._grads is None:
            raise GraphError("backward has not been run")
        return self._grads.get(node.id, np.zeros_like(node.value))


def gradient_check(build_loss: Callable[[], Node], param: Parameter, step: float = 1e-6) -> float:
    """Largest relative gap between backprop and central differences.

    ``build_loss`` must construct a fresh graph from the current parameter
    values and return its scalar loss node; the engine is define-by-run, so
    the graph is rebuilt for each perturbed evaluation.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    original = param.value
    param.zero_grad()
    loss = build_loss()
    loss.graph.backward(loss)
    analytic = param.grad.copy()
    numeric = np.zeros_like(analytic)
    work = original.copy()
    try:
        for idx in np.ndindex(*original.shape):
            work[idx] = original[idx] + step
            param.value = work
            up = float(build_loss().value)
            work[idx] = original[idx] - step
            param.value = work
            down = float(build_loss().value)
            work[idx] = original[idx]
            numeric[idx] = (up - down) / (2.0 * step)
    finally:
        param.value = original
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def split(x: np.ndarray, sizes: Sequence[int], axis: int = 1) -> list[np.ndarray]:
    """Inverse of feature-axis concatenation."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    return [_frozen(p) for p in np.split(x, np.cumsum(sizes)[:-1], axis=axis)]
