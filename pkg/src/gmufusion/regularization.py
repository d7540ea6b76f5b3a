"""Batch normalization, inverted dropout and max-norm projection.

Each regularizer comes in two flavours: an array function usable on its own,
and a graph-level version that the layers call while building a forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Graph, Node, Parameter, ShapeError, as_tensor

BN_EPS = 1e-8  # small enough that normalized batches have unit variance to 1e-6
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class BatchNormResult:
    out: np.ndarray
    normalized: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


def batch_norm_forward(
    x,
    gamma,
    beta,
    mode: str = "train",
    running_mean=None,
    running_var=None,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> BatchNormResult:
    """Normalize each column of ``x`` and apply the affine ``gamma``, ``beta``.

    In train mode batch statistics are used and the running statistics are
    updated with ``running = momentum * running + (1 - momentum) * batch``.
    Eval mode uses the running statistics unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    feat = x.shape[1:]
    running_mean = np.zeros(feat) if running_mean is None else np.asarray(running_mean, dtype=np.float64)
    running_var = np.ones(feat) if running_var is None else np.asarray(running_var, dtype=np.float64)
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError(f"batch norm in train mode needs N >= 2, got N={x.shape[0]}")
        mean, var = x.mean(axis=0), x.var(axis=0)
        running_mean = momentum * running_mean + (1.0 - momentum) * mean
        running_var = momentum * running_var + (1.0 - momentum) * var
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    normalized = (x - mean) / np.sqrt(var + eps)
    out = normalized * np.asarray(gamma) + np.asarray(beta)
    return BatchNormResult(out, normalized, running_mean, running_var)


class BatchNorm:
    """Per-feature batch normalization over axis 0 with learned scale and shift."""

    def __init__(self, name: str, shape: tuple[int, ...], eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.gamma = Parameter(f"{name}.gamma", np.ones(shape))
        self.beta = Parameter(f"{name}.beta", np.zeros(shape))
        self.running_mean = np.zeros(shape)
        self.running_var = np.ones(shape)
        self.eps = eps
        self.momentum = momentum

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def __call__(self, g: Graph, x: Node, train: bool) -> Node:
        if train:
            if x.shape[0] < 2:
                raise ShapeError(f"batch norm in train mode needs N >= 2, got N={x.shape[0]}")
            mean = g.apply("mean0", x)
            centered = g.apply("bias_add", x, -mean)
            inv_std = g.apply("rsqrt", g.apply("var0", x), eps=self.eps)
            normalized = g.apply("col_scale", centered, inv_std)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean.value
            self.running_var = m * self.running_var + (1 - m) * x.value.var(axis=0)
        else:
            shift = g.constant(-self.running_mean)
            scale = g.constant(1.0 / np.sqrt(self.running_var + self.eps))
            normalized = g.apply("col_scale", g.apply("bias_add", x, shift), scale)
        scaled = g.apply("col_scale", normalized, g.param(self.gamma))
        return g.apply("bias_add", scaled, g.param(self.beta))

    def state(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean.copy(), "running_var": self.running_var.copy()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.running_mean = state["running_mean"].copy()
        self.running_var = state["running_var"].copy()


def _check_rate(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    _check_rate(p)
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def dropout_forward(x, p: float, rng: np.random.Generator | None = None, mode: str = "train") -> np.ndarray:
    """Inverted dropout: survivors are scaled by 1/(1-p) so E[out] = x."""
    _check_rate(p)
    x = as_tensor(x, "dropout input")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    return as_tensor(x * dropout_mask(x.shape, p, rng))


def dropout(g: Graph, x: Node, p: float, rng: np.random.Generator | None, train: bool) -> Node:
    _check_rate(p)
    if not train or p == 0.0:
        return x
    return x * g.constant(dropout_mask(x.shape, p, rng), "dropout mask")


def max_norm_project(W, c: float, axis: int = 1) -> np.ndarray:
    """Rescale every unit whose incoming-weight norm exceeds ``c`` back to ``c``.

    For a ``[units x inputs]`` matrix the incoming weights are rows
    (``axis=1``); for a maxout tensor ``[d x m x k]`` they run along ``axis=0``.
    """
    if c <= 0:
        raise ValueError(f"max-norm radius must be positive, got {c}")
    W = np.asarray(W, dtype=np.float64)
    # scale first so huge weights do not overflow the squared sum
    peak = np.abs(W).max(axis=axis, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    norms = peak * np.sqrt(((W / safe) ** 2).sum(axis=axis, keepdims=True))
    factor = np.where(norms > c, c / np.where(norms > 0, norms, 1.0), 1.0)
    return W * factor


def apply_max_norm(params, c: float | None) -> None:
    """Project every max-norm-constrained parameter in place."""
    if c is None:
        return
    for p in params:
        if p.norm_axis is not None:
            p.value = max_norm_project(p.value, c, p.norm_axis)
