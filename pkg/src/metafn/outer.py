"""Outer-loop gradient aggregation and the meta-parameter update.

Two aggregators over a bundle of per-task gradients: plain summation,
and cosine-weighted rescaling where each task's gradient is scaled by

    s_i = 1 + (1/m) * sum_{j != i} cos(g_i, g_j)

so mutually aligned tasks reinforce each other and conflicting tasks
attenuate. The divisor is m (not m - 1) by deliberate choice. The scale
factor reading of the update rule is the only one that type-checks
(adding a scalar 1 to a gradient vector is meaningless).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ndcore
from .errors import LengthMismatch


@dataclass
class GradientBundle:
    grads: list[np.ndarray]
    task_ids: list[str]
    param_order: str = "gradnet-canonical"

    def __post_init__(self):
        if not self.grads:
            raise LengthMismatch("bundle must contain at least one gradient")
        n = self.grads[0].shape[0]
        for g in self.grads:
            if g.shape != (n,):
                raise LengthMismatch("all gradients must be flat vectors of equal length")
        if len(self.task_ids) != len(self.grads):
            raise LengthMismatch("task_ids must align with grads")

    @property
    def m(self) -> int:
        return len(self.grads)


@dataclass
class AggregationReport:
    weights: np.ndarray  # (m, m) pairwise cosines, diagonal unused
    scales: np.ndarray  # (m,) per-task scale factors
    aggregated: np.ndarray


def aggregate_plain(b: GradientBundle) -> np.ndarray:
    """Unweighted elementwise sum in fixed task order."""
    out = np.zeros_like(b.grads[0])
    for g in b.grads:
        out = out + g
    return out


def aggregate_oamfs(b: GradientBundle):
    """Cosine-weighted aggregation; returns (gradient, report)."""
    m = b.m
    w = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            w[i, j] = w[j, i] = ndcore.cosine(b.grads[i], b.grads[j])
    scales = 1.0 + (w.sum(axis=1)) / m  # diagonal is zero, so the sum skips j == i
    out = np.zeros_like(b.grads[0])
    for s, g in zip(scales, b.grads):
        out = out + s * g
    return out, AggregationReport(weights=w, scales=scales, aggregated=out)


def meta_step(theta_flat: np.ndarray, g: np.ndarray, beta: float) -> np.ndarray:
    """Plain SGD update theta <- theta - beta * g on flat parameters."""
    if beta <= 0:
        raise ValueError("meta learning rate must be positive")
    theta_flat = np.asarray(theta_flat, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if theta_flat.shape != g.shape:
        raise LengthMismatch(f"params {theta_flat.shape} vs gradient {g.shape}")
    return theta_flat - beta * g


class AdamState:
    """Optional adaptive-moment meta-optimizer behind the same step interface."""

    def __init__(self, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, theta_flat: np.ndarray, g: np.ndarray, beta: float) -> np.ndarray:
        if beta <= 0:
            raise ValueError("meta learning rate must be positive")
        if theta_flat.shape != g.shape:
            raise LengthMismatch(f"params {theta_flat.shape} vs gradient {g.shape}")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta_flat - beta * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, n: int) -> Optional[AdamState]:
    if kind == "adam":
        return AdamState(n)
    if kind == "sgd":
        return None
    raise ValueError(f"unknown optimizer {kind!r}")
