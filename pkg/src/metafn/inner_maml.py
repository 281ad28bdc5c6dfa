"""Gradient-step task adaptation (MAML) and its meta-gradients.

The inner loop takes ``n_steps`` full-batch gradient steps on the
support loss. Meta-gradients come in two flavors: first order (query
gradient at the adapted parameters, the FO-MAML default) and second
order, which back-propagates through the inner steps using central
finite-difference Hessian-vector products on the support loss. The
FD-HVP realization is an approximation adequate at small scale; FO is
exact by construction.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import gradnet
from .errors import NonFiniteLoss
from .tasks import Episode


class StepCounter:
    """Counts inner gradient steps taken."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def bump(self, k: int = 1):
        with self._lock:
            self.count += k

    def reset(self):
        with self._lock:
            self.count = 0


STEPS = StepCounter()


@dataclass
class InnerConfig:
    inner_lr: float = 0.01
    n_steps: int = 1
    order: str = "second"  # "first" | "second"

    def __post_init__(self):
        if self.inner_lr <= 0:
            raise ValueError("inner_lr must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")
        if self.order not in ("first", "second"):
            raise ValueError("order must be 'first' or 'second'")


@dataclass
class AdaptedParams:
    theta_prime: gradnet.NetParams
    origin: gradnet.NetParams
    trajectory: list[np.ndarray]  # flat params before each inner step
    config: InnerConfig


def _loss_and_grad_flat(theta: gradnet.NetParams, x, y, kind: str, n_way: int):
    """Loss and flat parameter gradient on one batch."""
    out, tape = gradnet.forward(theta, x)
    if kind == "regression":
        r = out[:, 0] - np.asarray(y, dtype=np.float64)
        loss = float(np.mean(r**2))
        upstream = np.zeros_like(out)
        upstream[:, 0] = 2.0 * r / r.shape[0]
    else:
        labels = np.asarray(y, dtype=np.int64)
        shifted = out - out.max(axis=1, keepdims=True)
        expf = np.exp(shifted)
        probs = expf / expf.sum(axis=1, keepdims=True)
        n = out.shape[0]
        loss = float(
            -np.mean(shifted[np.arange(n), labels] - np.log(expf.sum(axis=1)))
        )
        onehot = np.zeros_like(out)
        onehot[np.arange(n), labels] = 1.0
        upstream = (probs - onehot) / n
    grads, _ = gradnet.backward(tape, upstream)
    return loss, gradnet.flatten(grads)


def support_loss_grad(theta: gradnet.NetParams, episode: Episode):
    return _loss_and_grad_flat(
        theta, episode.support_x, episode.support_y, episode.kind, episode.n_way
    )


def query_loss_grad(theta: gradnet.NetParams, episode: Episode):
    return _loss_and_grad_flat(
        theta, episode.query_x, episode.query_y, episode.kind, episode.n_way
    )


def adapt_maml(episode: Episode, theta: gradnet.NetParams, cfg: InnerConfig) -> AdaptedParams:
    """n_steps of plain gradient descent on the support loss."""
    if episode.support_x.shape[0] == 0:
        raise ValueError("support set is empty")
    flat = gradnet.flatten(theta)
    trajectory = []
    for step in range(cfg.n_steps):
        trajectory.append(flat.copy())
        loss, g = support_loss_grad(gradnet.unflatten(flat, theta), episode)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise NonFiniteLoss(
                f"inner step {step}: support loss {loss!r} diverged (task {episode.task_id})"
            )
        flat = flat - cfg.inner_lr * g
        STEPS.bump()
    return AdaptedParams(
        theta_prime=gradnet.unflatten(flat, theta),
        origin=theta,
        trajectory=trajectory,
        config=cfg,
    )


def _support_hvp(theta_flat, vec, episode, like, fd_step):
    """Central-difference Hessian-vector product of the support loss."""
    vnorm = float(np.linalg.norm(vec))
    if vnorm == 0.0:
        return np.zeros_like(vec)
    eps = fd_step / vnorm
    _, gp = support_loss_grad(gradnet.unflatten(theta_flat + eps * vec, like), episode)
    _, gm = support_loss_grad(gradnet.unflatten(theta_flat - eps * vec, like), episode)
    return (gp - gm) / (2.0 * eps)


def meta_gradient(
    episode: Episode,
    theta: gradnet.NetParams,
    adapted: AdaptedParams,
    cfg: InnerConfig,
) -> np.ndarray:
    """Flat gradient of the query loss with respect to the meta-parameters.

    First order treats the query gradient at theta' as the meta-gradient.
    Second order multiplies through each inner step's Jacobian
    (I - lr * H_support) in reverse, with H applied via FD-HVPs.
    """
    loss, g = query_loss_grad(adapted.theta_prime, episode)
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        raise NonFiniteLoss(f"query loss {loss!r} diverged (task {episode.task_id})")
    if cfg.order == "first" or cfg.n_steps == 0:
        return g
    fd_step = 1e-4 * (1.0 + float(np.abs(gradnet.flatten(theta)).max()))
    for theta_t in reversed(adapted.trajectory):
        hv = _support_hvp(theta_t, g, episode, theta, fd_step)
        g = g - cfg.inner_lr * hv
    return g
