"""Fusion layers and the classifiers built from them.

Weight matrices use the ``[units x inputs]`` layout, so an affine map is
``x @ W.T``. Graph-level functions (``gmu_bimodal``, ``maxout_layer`` ...) take
a :class:`~gmufusion.tensor.Graph` and nodes; the ``*_forward`` functions wrap
them for plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .regularization import BatchNorm, dropout
from .tensor import Graph, Node, Parameter, ShapeError, as_tensor

MODEL_KINDS = ("gmu", "maxout_mlp", "logistic", "moe_tied", "moe_untied", "concat", "linear_sum", "avg_probs")


def _uniform(rng: np.random.Generator, shape, init_range: float) -> np.ndarray:
    return rng.uniform(-init_range, init_range, size=shape)


def _affine(g: Graph, x: Node, W: Parameter, b: Parameter | None) -> Node:
    out = g.apply("linear", x, g.param(W))
    return g.apply("bias_add", out, g.param(b)) if b is not None else out


def _inputs(g: Graph, xs) -> list[Node]:
    return [x if isinstance(x, Node) else g.constant(x, "input") for x in xs]


def _check_rows(xs) -> None:
    rows = {x.shape[0] for x in xs}
    if len(rows) > 1:
        raise ShapeError(f"modalities disagree on sample count: {[x.shape for x in xs]}")


# ---------------------------------------------------------------------------
# gated multimodal unit
# ---------------------------------------------------------------------------

@dataclass
class GmuBimodalParams:
    W_v: Parameter
    W_t: Parameter
    W_z: Parameter
    b_v: Parameter | None = None
    b_t: Parameter | None = None
    b_z: Parameter | None = None

    def __post_init__(self):
        d_h = self.W_v.shape[0]
        if self.W_t.shape[0] != d_h or self.W_z.shape[0] != d_h:
            raise ShapeError("W_v, W_t and W_z must share the output extent")
        if self.W_z.shape[1] != self.W_v.shape[1] + self.W_t.shape[1]:
            raise ShapeError(f"W_z expects {self.W_v.shape[1] + self.W_t.shape[1]} inputs, has {self.W_z.shape[1]}")
        for b in (self.b_v, self.b_t, self.b_z):
            if b is not None and b.shape != (d_h,):
                raise ShapeError(f"bias {b.name} must have shape ({d_h},)")

    @classmethod
    def init(cls, d_v, d_t, d_h, rng, init_range=0.1, bias=False, prefix="gmu"):
        def w(name, d_in):
            return Parameter(f"{prefix}.{name}", _uniform(rng, (d_h, d_in), init_range), norm_axis=1)

        def b(name):
            return Parameter(f"{prefix}.{name}", np.zeros(d_h)) if bias else None

        return cls(w("W_v", d_v), w("W_t", d_t), w("W_z", d_v + d_t), b("b_v"), b("b_t"), b("b_z"))

    @property
    def d_h(self) -> int:
        return self.W_v.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.W_v.shape[1], self.W_t.shape[1]

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.W_v, self.W_t, self.W_z, self.b_v, self.b_t, self.b_z) if p is not None]


@dataclass
class GmuMultimodalParams:
    W: list[Parameter]
    W_z: list[Parameter]
    b: list[Parameter] | None = None
    b_z: list[Parameter] | None = None

    def __post_init__(self):
        if len(self.W) < 2 or len(self.W) != len(self.W_z):
            raise ShapeError("need k >= 2 modalities with one gate each")
        d_h = self.W[0].shape[0]
        total = sum(w.shape[1] for w in self.W)
        for w in self.W + self.W_z:
            if w.shape[0] != d_h:
                raise ShapeError("all transforms and gates must share d_h")
        for wz in self.W_z:
            if wz.shape[1] != total:
                raise ShapeError(f"gate {wz.name} expects {total} inputs, has {wz.shape[1]}")

    @classmethod
    def init(cls, dims: Sequence[int], d_h, rng, init_range=0.1, bias=False, prefix="gmu"):
        total = sum(dims)
        W = [Parameter(f"{prefix}.W_{i}", _uniform(rng, (d_h, d), init_range), 1) for i, d in enumerate(dims)]
        W_z = [Parameter(f"{prefix}.W_z{i}", _uniform(rng, (d_h, total), init_range), 1) for i in range(len(dims))]
        if not bias:
            return cls(W, W_z)
        b = [Parameter(f"{prefix}.b_{i}", np.zeros(d_h)) for i in range(len(dims))]
        b_z = [Parameter(f"{prefix}.b_z{i}", np.zeros(d_h)) for i in range(len(dims))]
        return cls(W, W_z, b, b_z)

    @property
    def k(self) -> int:
        return len(self.W)

    @property
    def d_h(self) -> int:
        return self.W[0].shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.W)

    def parameters(self) -> list[Parameter]:
        return self.W + self.W_z + (self.b or []) + (self.b_z or [])


@dataclass(frozen=True)
class GmuOutput:
    h: np.ndarray
    gates: tuple[np.ndarray, ...]
    branches: tuple[np.ndarray, ...]

    @property
    def z(self) -> np.ndarray:
        return self.gates[0]


def _check_dims(xs, dims) -> None:
    got = tuple(x.shape[1] if len(x.shape) == 2 else None for x in xs)
    if got != tuple(dims):
        raise ShapeError(f"feature extents {got} do not match parameters {tuple(dims)}")
    _check_rows(xs)


def gmu_bimodal(g: Graph, x_v: Node, x_t: Node, p: GmuBimodalParams) -> tuple[Node, Node, Node, Node]:
    """Returns ``(h, z, h_v, h_t)``; ``z`` weighs the visual branch."""
    _check_dims([x_v, x_t], p.dims)
    h_v = g.apply("tanh", _affine(g, x_v, p.W_v, p.b_v))
    h_t = g.apply("tanh", _affine(g, x_t, p.W_t, p.b_t))
    z = g.apply("sigmoid", _affine(g, g.apply("concat", x_v, x_t), p.W_z, p.b_z))
    h = z * h_v + (1.0 - z) * h_t
    return h, z, h_v, h_t


def gmu_bimodal_forward(x_v, x_t, params: GmuBimodalParams) -> GmuOutput:
    g = Graph()
    h, z, h_v, h_t = gmu_bimodal(g, *_inputs(g, [x_v, x_t]), params)
    return GmuOutput(h.value, (z.value,), (h_v.value, h_t.value))


def gmu_multimodal(g: Graph, xs: Sequence[Node], p: GmuMultimodalParams) -> tuple[Node, list[Node], list[Node]]:
    """k-modal unit: each modality has its own, unnormalized sigmoid gate."""
    if len(xs) < 2:
        raise ShapeError("the k-modal unit needs at least two modalities")
    if len(xs) != p.k:
        raise ShapeError(f"got {len(xs)} modalities for a {p.k}-modal unit")
    _check_dims(xs, p.dims)
    joint = g.apply("concat", *xs)
    branches, gates = [], []
    h = None
    for i, x in enumerate(xs):
        h_i = g.apply("tanh", _affine(g, x, p.W[i], p.b[i] if p.b else None))
        z_i = g.apply("sigmoid", _affine(g, joint, p.W_z[i], p.b_z[i] if p.b_z else None))
        term = z_i * h_i
        h = term if h is None else h + term
        branches.append(h_i)
        gates.append(z_i)
    return h, gates, branches


def gmu_multimodal_forward(xs, params: GmuMultimodalParams) -> GmuOutput:
    g = Graph()
    h, gates, branches = gmu_multimodal(g, _inputs(g, xs), params)
    return GmuOutput(h.value, tuple(z.value for z in gates), tuple(b.value for b in branches))


# ---------------------------------------------------------------------------
# maxout MLP and logistic head
# ---------------------------------------------------------------------------

@dataclass
class MaxoutLayerParams:
    W: Parameter  # [d x m x k]
    b: Parameter  # [m x k]

    def __post_init__(self):
        if len(self.W.shape) != 3:
            raise ShapeError(f"maxout W must be [d x m x k], got {self.W.shape}")
        d, m, k = self.W.shape
        if k < 2:
            raise ShapeError(f"maxout needs at least 2 pieces, got {k}")
        if self.b.shape != (m, k):
            raise ShapeError(f"maxout b must be [{m} x {k}], got {self.b.shape}")

    @classmethod
    def init(cls, d, m, k, rng, init_range=0.1, prefix="maxout"):
        return cls(
            Parameter(f"{prefix}.W", _uniform(rng, (d, m, k), init_range), norm_axis=0),
            Parameter(f"{prefix}.b", np.zeros((m, k))),
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.W.shape

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]


@dataclass
class LogisticParams:
    W: Parameter  # [Q x d]
    b: Parameter | None

    @classmethod
    def init(cls, d, q, rng, init_range=0.1, prefix="logistic", bias=True):
        W = Parameter(f"{prefix}.W", _uniform(rng, (q, d), init_range), norm_axis=1)
        return cls(W, Parameter(f"{prefix}.b", np.zeros(q)) if bias else None)

    def parameters(self) -> list[Parameter]:
        return [self.W] + ([self.b] if self.b is not None else [])


@dataclass
class MaxoutMLPParams:
    layers: list[MaxoutLayerParams]
    head: LogisticParams

    def parameters(self) -> list[Parameter]:
        out = [p for layer in self.layers for p in layer.parameters()]
        return out + self.head.parameters()


def maxout_layer(g: Graph, x: Node, p: MaxoutLayerParams, bn: BatchNorm | None = None, train: bool = False) -> Node:
    d, m, k = p.shape
    if x.shape[1:] != (d,):
        raise ShapeError(f"maxout layer expects {d} inputs, got {x.shape}")
    flat = g.apply("reshape", g.param(p.W), shape=(d, m * k))
    pieces = g.apply("reshape", g.apply("matmul", x, flat), shape=(x.shape[0], m, k))
    pieces = g.apply("bias_add", pieces, g.param(p.b))
    if bn is not None:
        pieces = bn(g, pieces, train)
    return g.apply("max_pieces", pieces)


def logistic(g: Graph, x: Node, p: LogisticParams) -> Node:
    """Per-label logits; the sigmoid is folded into the loss."""
    if x.shape[1] != p.W.shape[1]:
        raise ShapeError(f"head expects {p.W.shape[1]} inputs, got {x.shape}")
    return _affine(g, x, p.W, p.b)


def maxout_mlp(
    g: Graph,
    x: Node,
    p: MaxoutMLPParams,
    bns: Sequence[BatchNorm] | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
) -> Node:
    if not p.layers:
        raise ShapeError("a maxout MLP needs at least one maxout layer")
    for i, layer in enumerate(p.layers):
        x = maxout_layer(g, x, layer, bns[i] if bns else None, train)
        x = dropout(g, x, dropout_rate, rng, train)
    return logistic(g, x, p.head)


def maxout_mlp_forward(x, layers: Sequence[MaxoutLayerParams], head: LogisticParams) -> np.ndarray:
    g = Graph()
    logits = maxout_mlp(g, g.constant(x, "input"), MaxoutMLPParams(list(layers), head))
    return g.apply("sigmoid", logits).value


# ---------------------------------------------------------------------------
# mixture of experts
# ---------------------------------------------------------------------------

@dataclass
class MoEParams:
    experts: list  # LogisticParams or MaxoutMLPParams, one per modality
    gate: LogisticParams  # concatenated inputs -> k (tied) or k*Q (untied) logits
    mode: str = "tied"

    def __post_init__(self):
        if self.mode not in ("tied", "untied"):
            raise ValueError(f"mode must be 'tied' or 'untied', got {self.mode!r}")
        k = len(self.experts)
        q = self.n_labels
        want = k if self.mode == "tied" else k * q
        if self.gate.W.shape[0] != want:
            raise ShapeError(f"{self.mode} gate needs {want} outputs, has {self.gate.W.shape[0]}")

    @property
    def n_labels(self) -> int:
        e = self.experts[0]
        return (e.head if isinstance(e, MaxoutMLPParams) else e).W.shape[0]

    def parameters(self) -> list[Parameter]:
        return [p for e in self.experts for p in e.parameters()] + self.gate.parameters()


def _expert_logits(g, x, expert, bns, train, rng, dropout_rate):
    if isinstance(expert, MaxoutMLPParams):
        return maxout_mlp(g, x, expert, bns, train, rng, dropout_rate)
    return logistic(g, x, expert)


def moe(
    g: Graph,
    xs: Sequence[Node],
    p: MoEParams,
    expert_bns: Sequence | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
) -> tuple[Node, Node]:
    """Returns ``(probs [N x Q], gates)``; gates are ``[N x k]`` or ``[N x k x Q]``."""
    k, q = len(p.experts), p.n_labels
    if len(xs) != k:
        raise ShapeError(f"{len(xs)} modalities for {k} experts")
    _check_rows(xs)
    n = xs[0].shape[0]
    stacked = []
    for i, (x, expert) in enumerate(zip(xs, p.experts)):
        logits = _expert_logits(g, x, expert, expert_bns[i] if expert_bns else None, train, rng, dropout_rate)
        stacked.append(g.apply("reshape", g.apply("sigmoid", logits), shape=(n, 1, q)))
    probs = g.apply("concat", *stacked, axis=1)
    gate_logits = logistic(g, g.apply("concat", *xs), p.gate)
    if p.mode == "tied":
        gates = g.apply("softmax", gate_logits, axis=1)
        weights = g.apply("broadcast_last", gates, n=q)
    else:
        gates = g.apply("softmax", g.apply("reshape", gate_logits, shape=(n, k, q)), axis=1)
        weights = gates
    return g.apply("sum_axis", weights * probs, axis=1), gates


@dataclass(frozen=True)
class MoEOutput:
    probs: np.ndarray
    gates: np.ndarray


def moe_forward(xs, params: MoEParams) -> MoEOutput:
    g = Graph()
    probs, gates = moe(g, _inputs(g, xs), params)
    return MoEOutput(probs.value, gates.value)


# ---------------------------------------------------------------------------
# fusion baselines
# ---------------------------------------------------------------------------

def fusion_concat(xs) -> np.ndarray:
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    _check_rows(xs)
    return as_tensor(np.concatenate(xs, axis=1))


def linear_sum(g: Graph, xs: Sequence[Node], projections: Sequence[Parameter]) -> Node:
    if len(xs) != len(projections):
        raise ShapeError(f"{len(xs)} modalities for {len(projections)} projections")
    _check_rows(xs)
    out = None
    for x, P in zip(xs, projections):
        term = g.apply("linear", x, g.param(P))
        out = term if out is None else out + term
    return out


def fusion_linear_sum(xs, projections) -> np.ndarray:
    g = Graph()
    params = [
        p if isinstance(p, Parameter) else Parameter(f"projection{i}", p)
        for i, p in enumerate(projections)
    ]
    return linear_sum(g, _inputs(g, xs), params).value


def fusion_avg_probs(probs_list, threshold: float = 0.5) -> np.ndarray:
    """Late fusion: mean of per-model probabilities, then ``>= threshold``."""
    arrays = [np.asarray(p, dtype=np.float64) for p in probs_list]
    if not arrays:
        raise ValueError("need at least one probability matrix")
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ShapeError(f"probability matrices disagree in shape: {[a.shape for a in arrays]}")
    stacked = np.stack(arrays)
    if not np.all((stacked >= 0.0) & (stacked <= 1.0)):
        raise ValueError("probabilities must lie in [0, 1]")
    return (stacked.mean(axis=0) >= threshold).astype(np.int64)


# ---------------------------------------------------------------------------
# trainable classifiers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Architecture choices that are not searched over.

    ``hidden`` overrides the searched hidden size (the synthetic study uses a
    single GMU unit). ``head`` is what sits on top of a GMU: ``maxout``,
    ``logistic`` or ``none`` (``h`` itself is the logit, needs ``hidden == Q``).
    """

    kind: str = "gmu"
    head: str = "maxout"
    n_layers: int = 2
    head_layers: int = 1
    pieces: int = 2
    gmu_bias: bool = False
    hidden: int | None = None
    expert: str = "maxout"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {MODEL_KINDS}")
        if self.head not in ("maxout", "logistic", "none"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.expert not in ("maxout", "logistic"):
            raise ValueError(f"unknown expert {self.expert!r}")


class Classifier:
    """Base class: multilabel classifier over a list of modality matrices."""

    output = "logits"

    def __init__(self, dropout_rate: float = 0.0):
        self.dropout_rate = dropout_rate
        self.batch_norms: list[BatchNorm] = []

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def forward(self, g: Graph, xs: Sequence[Node], train: bool = False, rng=None) -> Node:
        raise NotImplementedError

    def loss(self, g: Graph, xs: Sequence[Node], y: Node, train: bool = False, rng=None) -> Node:
        out = self.forward(g, xs, train, rng)
        return g.apply("bce_logits" if self.output == "logits" else "bce_probs", out, y)

    def predict_proba(self, xs) -> np.ndarray:
        g = Graph()
        out = self.forward(g, _inputs(g, xs), train=False)
        return out.value if self.output == "probs" else g.apply("sigmoid", out).value

    def state(self) -> dict:
        return {
            "params": {p.name: p.value for p in self.parameters()},
            "bn": [bn.state() for bn in self.batch_norms],
        }

    def load_state(self, state: dict) -> None:
        for p in self.parameters():
            p.value = state["params"][p.name]
        for bn, s in zip(self.batch_norms, state["bn"]):
            bn.load_state(s)


def _make_mlp(d_in, hidden, q, n_layers, pieces, rng, init_range, batch_norm, prefix):
    layers, bns, d = [], [], d_in
    for i in range(n_layers):
        layers.append(MaxoutLayerParams.init(d, hidden, pieces, rng, init_range, f"{prefix}.layer{i}"))
        if batch_norm:
            bns.append(BatchNorm(f"{prefix}.bn{i}", (hidden, pieces)))
        d = hidden
    head = LogisticParams.init(d, q, rng, init_range, f"{prefix}.head")
    return MaxoutMLPParams(layers, head), bns


def _joined(g: Graph, xs: Sequence[Node]) -> Node:
    _check_rows(xs)
    return xs[0] if len(xs) == 1 else g.apply("concat", *xs)


class LogisticClassifier(Classifier):
    """Logistic regression on the concatenation of all given modalities."""

    def __init__(self, dims, n_labels, rng, init_range=0.1, dropout_rate=0.0):
        super().__init__(dropout_rate)
        self.params = LogisticParams.init(sum(dims), n_labels, rng, init_range)

    def parameters(self):
        return self.params.parameters()

    def forward(self, g, xs, train=False, rng=None):
        return logistic(g, _joined(g, xs), self.params)


class MaxoutMLPClassifier(Classifier):
    """MaxoutMLP; with several modalities this is the concatenation baseline."""

    def __init__(self, dims, n_labels, hidden, rng, init_range=0.1, dropout_rate=0.0,
                 batch_norm=True, n_layers=2, pieces=2):
        super().__init__(dropout_rate)
        self.mlp, self.batch_norms = _make_mlp(
            sum(dims), hidden, n_labels, n_layers, pieces, rng, init_range, batch_norm, "mlp")

    def parameters(self):
        return self.mlp.parameters() + [p for bn in self.batch_norms for p in bn.parameters()]

    def forward(self, g, xs, train=False, rng=None):
        return maxout_mlp(g, _joined(g, xs), self.mlp, self.batch_norms, train, rng, self.dropout_rate)


class LinearSumClassifier(Classifier):
    """Project every modality to ``hidden`` units, add, then a MaxoutMLP."""

    def __init__(self, dims, n_labels, hidden, rng, init_range=0.1, dropout_rate=0.0,
                 batch_norm=True, n_layers=2, pieces=2):
        super().__init__(dropout_rate)
        self.projections = [
            Parameter(f"sum.P{i}", _uniform(rng, (hidden, d), init_range), norm_axis=1)
            for i, d in enumerate(dims)
        ]
        self.mlp, self.batch_norms = _make_mlp(
            hidden, hidden, n_labels, n_layers, pieces, rng, init_range, batch_norm, "mlp")

    def parameters(self):
        return self.projections + self.mlp.parameters() + [p for bn in self.batch_norms for p in bn.parameters()]

    def forward(self, g, xs, train=False, rng=None):
        fused = linear_sum(g, xs, self.projections)
        return maxout_mlp(g, fused, self.mlp, self.batch_norms, train, rng, self.dropout_rate)


class GMUClassifier(Classifier):
    """A GMU layer (bimodal for two inputs, k-modal otherwise) plus a head."""

    def __init__(self, dims, n_labels, hidden, rng, init_range=0.1, dropout_rate=0.0,
                 batch_norm=True, head="maxout", head_layers=1, pieces=2, bias=False):
        super().__init__(dropout_rate)
        if len(dims) < 2:
            raise ShapeError("a GMU needs at least two modalities")
        if head == "none" and hidden != n_labels:
            raise ShapeError(f"head 'none' uses h as logits: hidden ({hidden}) must equal Q ({n_labels})")
        if len(dims) == 2:
            self.gmu = GmuBimodalParams.init(dims[0], dims[1], hidden, rng, init_range, bias)
        else:
            self.gmu = GmuMultimodalParams.init(dims, hidden, rng, init_range, bias)
        self.head_kind = head
        self.head = None
        if head == "maxout":
            self.head, self.batch_norms = _make_mlp(
                hidden, hidden, n_labels, head_layers, pieces, rng, init_range, batch_norm, "head")
        elif head == "logistic":
            self.head = LogisticParams.init(hidden, n_labels, rng, init_range, "head")

    def parameters(self):
        out = self.gmu.parameters()
        if self.head is not None:
            out = out + self.head.parameters()
        return out + [p for bn in self.batch_norms for p in bn.parameters()]

    def fuse(self, g, xs) -> tuple[Node, list[Node]]:
        if isinstance(self.gmu, GmuBimodalParams):
            if len(xs) != 2:
                raise ShapeError(f"bimodal GMU got {len(xs)} modalities")
            h, z, _, _ = gmu_bimodal(g, xs[0], xs[1], self.gmu)
            return h, [z]
        h, gates, _ = gmu_multimodal(g, xs, self.gmu)
        return h, gates

    def forward(self, g, xs, train=False, rng=None):
        h, _ = self.fuse(g, xs)
        if self.head_kind == "none":
            return h
        h = dropout(g, h, self.dropout_rate, rng, train)
        if self.head_kind == "logistic":
            return logistic(g, h, self.head)
        return maxout_mlp(g, h, self.head, self.batch_norms, train, rng, self.dropout_rate)

    def gates(self, xs) -> list[np.ndarray]:
        """Gate activations in eval mode; one ``[N x d_h]`` array per gate."""
        g = Graph()
        _, gates = self.fuse(g, _inputs(g, xs))
        return [z.value for z in gates]


class MoEClassifier(Classifier):
    """One expert per modality mixed by a softmax gate over all features."""

    output = "probs"

    def __init__(self, dims, n_labels, hidden, rng, init_range=0.1, dropout_rate=0.0,
                 batch_norm=True, mode="tied", expert="maxout", n_layers=2, pieces=2):
        super().__init__(dropout_rate)
        experts, self.expert_bns = [], []
        for i, d in enumerate(dims):
            if expert == "maxout":
                mlp, bns = _make_mlp(d, hidden, n_labels, n_layers, pieces, rng, init_range,
                                     batch_norm, f"expert{i}")
                experts.append(mlp)
                self.expert_bns.append(bns)
                self.batch_norms.extend(bns)
            else:
                experts.append(LogisticParams.init(d, n_labels, rng, init_range, f"expert{i}"))
                self.expert_bns.append(None)
        k = len(dims)
        gate = LogisticParams.init(sum(dims), k if mode == "tied" else k * n_labels, rng, init_range, "gate")
        self.params = MoEParams(experts, gate, mode)

    def parameters(self):
        return self.params.parameters() + [p for bn in self.batch_norms for p in bn.parameters()]

    def forward(self, g, xs, train=False, rng=None):
        probs, _ = moe(g, xs, self.params, self.expert_bns, train, rng, self.dropout_rate)
        return probs


def build_model(spec: ModelSpec, dims: Sequence[int], n_labels: int, hidden_size: int,
                init_range: float, rng: np.random.Generator, dropout_rate: float = 0.0,
                batch_norm: bool = True) -> Classifier:
    """Instantiate the classifier for ``spec``; ``avg_probs`` is not a single model."""
    dims = list(dims)
    hidden = spec.hidden or hidden_size
    common = dict(rng=rng, init_range=init_range, dropout_rate=dropout_rate)
    kind = spec.kind
    if kind == "logistic":
        return LogisticClassifier(dims, n_labels, **common)
    if kind in ("maxout_mlp", "concat"):
        return MaxoutMLPClassifier(dims, n_labels, hidden, batch_norm=batch_norm,
                                   n_layers=spec.n_layers, pieces=spec.pieces, **common)
    if kind == "linear_sum":
        return LinearSumClassifier(dims, n_labels, hidden, batch_norm=batch_norm,
                                   n_layers=spec.n_layers, pieces=spec.pieces, **common)
    if kind == "gmu":
        return GMUClassifier(dims, n_labels, hidden, batch_norm=batch_norm, head=spec.head,
                             head_layers=spec.head_layers, pieces=spec.pieces, bias=spec.gmu_bias, **common)
    if kind in ("moe_tied", "moe_untied"):
        return MoEClassifier(dims, n_labels, hidden, batch_norm=batch_norm, mode=kind[4:],
                             expert=spec.expert, n_layers=spec.n_layers, pieces=spec.pieces, **common)
    raise ValueError(f"{kind!r} combines separately trained models; see training.train_avg_probs")
