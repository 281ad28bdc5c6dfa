"""Closed-form kernel inner loop and its meta-gradients.

Task adaptation is one regularized kernel regression solve in function
space: build the RBF Gram matrix K over the (optionally embedded)
support points, solve (K + lambda*I) alpha = y, and predict on queries
as f(x) = sum_j alpha_j k(x_j, x). Classification runs the same solve
one-vs-all on one-hot targets with argmax decoding.

The meta-objective per task combines the query loss with two
regularizers: a gradient-norm penalty on the fit and an effective
degrees-of-freedom term tr(K (K + lambda*I)^{-1}) that shrinks as the
ridge weight grows. Gradients with respect to log sigma, log lambda and
the embedding weights are computed by a hand-written reverse sweep
through the solve (via :func:`metafn.ndcore.solve_adjoint`), the kernel
evaluations and the embedding network.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import backend, gradnet, ndcore
from .errors import DimensionMismatch, NotPositiveDefinite
from .tasks import Episode


class SolveCounter:
    """Counts Cholesky factorizations; one per task adaptation."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def bump(self):
        with self._lock:
            self.count += 1

    def reset(self):
        with self._lock:
            self.count = 0


SOLVES = SolveCounter()


@dataclass
class KernelParams:
    """Trainable kernel hyperparameters plus an optional embedding net.

    sigma and lambda are stored in log space so positivity holds by
    construction.
    """

    log_sigma: float = 0.0  # sigma = 1.0
    log_lambda: float = np.log(0.1)  # lambda = 0.1
    embed: Optional[gradnet.NetParams] = None

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    @property
    def lam(self) -> float:
        return float(np.exp(self.log_lambda))

    def copy(self) -> "KernelParams":
        return KernelParams(
            self.log_sigma,
            self.log_lambda,
            self.embed.copy() if self.embed is not None else None,
        )


@dataclass
class KernelGrads:
    """Gradients in the same layout as KernelParams."""

    log_sigma: float
    log_lambda: float
    embed: Optional[gradnet.NetParams]


@dataclass
class RegWeights:
    mu: float = 0.0
    gamma: float = 0.0
    mu_sign: int = 1  # +1 penalizes large fit gradients; -1 is the ablation sign

    def __post_init__(self):
        if self.mu < 0 or self.gamma < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if self.mu_sign not in (1, -1):
            raise ValueError("mu_sign must be +1 or -1")


@dataclass
class KernelAdaptation:
    support_z: np.ndarray
    alpha: np.ndarray  # (n,) regression or (n, c) one-vs-all
    targets_y: np.ndarray
    params_snapshot: KernelParams
    kind: str


def flatten_params(kp: KernelParams) -> np.ndarray:
    """Canonical flat order: embedding net first, then log sigma, log lambda."""
    head = gradnet.flatten(kp.embed) if kp.embed is not None else np.empty(0)
    return np.concatenate([head, [kp.log_sigma, kp.log_lambda]])


def unflatten_params(v: np.ndarray, like: KernelParams) -> KernelParams:
    if like.embed is not None:
        n = gradnet.num_params(like.embed)
        embed = gradnet.unflatten(v[:n], like.embed)
    else:
        n = 0
        embed = None
    if v.size != n + 2:
        raise DimensionMismatch(f"flat vector has {v.size} entries, expected {n + 2}")
    return KernelParams(float(v[n]), float(v[n + 1]), embed)


def flatten_grads(g: KernelGrads) -> np.ndarray:
    head = gradnet.flatten(g.embed) if g.embed is not None else np.empty(0)
    return np.concatenate([head, [g.log_sigma, g.log_lambda]])


def rbf_kernel(z1, z2, sigma: float) -> float:
    """exp(-||z1 - z2||^2 / (2 sigma^2)), in (0, 1]."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise DimensionMismatch(f"points have shapes {z1.shape} and {z2.shape}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return float(np.exp(-np.sum((z1 - z2) ** 2) / (2.0 * sigma**2)))


def rbf_gram(za: np.ndarray, zb: np.ndarray, sigma: float) -> np.ndarray:
    d = backend.pairwise_sq_dists(za, zb)
    return np.exp(-d / (2.0 * sigma**2))


def _embed(kp: KernelParams, x: np.ndarray, want_tape=False):
    if kp.embed is None:
        return np.asarray(x, dtype=np.float64), None
    z, tape = gradnet.forward(kp.embed, x)
    return z, (tape if want_tape else None)


def _one_hot(labels: np.ndarray, n_way: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_way))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def _targets(episode: Episode) -> np.ndarray:
    if episode.kind == "classification":
        return _one_hot(episode.support_y, episode.n_way)
    return np.asarray(episode.support_y, dtype=np.float64)


def adapt(episode: Episode, kp: KernelParams) -> KernelAdaptation:
    """One closed-form solve per task; no iterative inner loop."""
    if episode.support_x.shape[0] == 0:
        raise ValueError("support set is empty")
    zs, _ = _embed(kp, episode.support_x)
    k = rbf_gram(zs, zs, kp.sigma)
    y = _targets(episode)
    SOLVES.bump()
    alpha = ndcore.solve_regularized(k, kp.lam, y)
    return KernelAdaptation(zs, alpha, y, kp, episode.kind)


def predict(a: KernelAdaptation, x: np.ndarray) -> np.ndarray:
    """f(x) = sum_j alpha_j k(x_j, x); per-class scores for classification."""
    zq, _ = _embed(a.params_snapshot, x)
    if zq.shape[1] != a.support_z.shape[1]:
        raise DimensionMismatch(
            f"query dim {zq.shape[1]} != support dim {a.support_z.shape[1]}"
        )
    kqs = rbf_gram(zq, a.support_z, a.params_snapshot.sigma)
    return kqs @ a.alpha


def predict_labels(a: KernelAdaptation, x: np.ndarray) -> np.ndarray:
    scores = predict(a, x)
    return np.argmax(scores, axis=1)  # argmax ties break to the lowest index


def grad_norm_penalty(a: KernelAdaptation, episode: Episode) -> float:
    """Squared-loss fit-gradient norm over the meta-update set: 4*sum(residual^2)."""
    f = predict(a, episode.query_x)
    if episode.kind == "classification":
        y = _one_hot(episode.query_y, episode.n_way)
    else:
        y = np.asarray(episode.query_y, dtype=np.float64)
    return float(4.0 * np.sum((f - y) ** 2))


def info_penalty(kp: KernelParams, episode: Episode) -> float:
    """Effective degrees of freedom tr(K (K + lambda*I)^{-1}) in [0, n]."""
    zs, _ = _embed(kp, episode.support_x)
    k = rbf_gram(zs, zs, kp.sigma)
    n = k.shape[0]
    m = k + kp.lam * np.eye(n)
    try:
        lower = backend.cholesky_lower(m)
    except ArithmeticError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    minv = backend.cho_solve(lower, np.eye(n))
    return float(n - kp.lam * np.trace(minv))


def _query_loss_and_grad(f: np.ndarray, episode: Episode):
    """Returns (loss, dLoss/dF). MSE for regression, softmax CE otherwise."""
    if episode.kind == "regression":
        y = np.asarray(episode.query_y, dtype=np.float64)
        r = f - y
        return float(np.mean(r**2)), 2.0 * r / r.shape[0]
    y = _one_hot(episode.query_y, episode.n_way)
    shifted = f - f.max(axis=1, keepdims=True)
    expf = np.exp(shifted)
    probs = expf / expf.sum(axis=1, keepdims=True)
    n = f.shape[0]
    loss = -np.sum(y * (shifted - np.log(expf.sum(axis=1, keepdims=True)))) / n
    return float(loss), (probs - y) / n


def task_objective(episode: Episode, kp: KernelParams, rw: RegWeights):
    """Per-task meta-objective and its gradients.

    Returns (loss, KernelGrads). Exactly one Cholesky factorization is
    performed; the adjoint solves reuse the factor.
    """
    zs, tape_s = _embed(kp, episode.support_x, want_tape=True)
    zq, tape_q = _embed(kp, episode.query_x, want_tape=True)
    sigma, lam = kp.sigma, kp.lam
    n = zs.shape[0]

    dss = backend.pairwise_sq_dists(zs, zs)
    kss = np.exp(-dss / (2.0 * sigma**2))
    m = kss + lam * np.eye(n)
    SOLVES.bump()
    try:
        lower = backend.cholesky_lower((m + m.T) / 2.0)
    except ArithmeticError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    y = _targets(episode)
    alpha = backend.cho_solve(lower, y)

    dqs = backend.pairwise_sq_dists(zq, zs)
    kqs = np.exp(-dqs / (2.0 * sigma**2))
    f = kqs @ alpha

    loss_q, g_f = _query_loss_and_grad(f, episode)
    yq = (
        _one_hot(episode.query_y, episode.n_way)
        if episode.kind == "classification"
        else np.asarray(episode.query_y, dtype=np.float64)
    )
    resid = f - yq
    pen_grad = float(4.0 * np.sum(resid**2))
    g_f = g_f + rw.mu_sign * rw.mu * 8.0 * resid

    minv = backend.cho_solve(lower, np.eye(n))
    pen_info = float(n - lam * np.trace(minv))

    loss = loss_q + rw.mu_sign * rw.mu * pen_grad + rw.gamma * pen_info

    # reverse sweep -----------------------------------------------------
    a2 = alpha.reshape(n, -1)
    gf2 = g_f.reshape(g_f.shape[0], -1)
    g_kqs = gf2 @ a2.T
    g_alpha = kqs.T @ gf2

    v = backend.cho_solve(lower, g_alpha)
    g_m = -(v @ a2.T)
    g_m = (g_m + g_m.T) / 2.0
    grad_lam = -float(np.sum(v * a2))

    # effective-dof term: d/dM tr(K M^{-1}) with K = M - lam I
    if rw.gamma != 0.0:
        m2 = minv @ minv
        g_m = g_m + rw.gamma * lam * m2
        grad_lam += rw.gamma * float(-np.trace(minv) + lam * np.trace(m2))

    g_kss = g_m  # M = Kss + lam*I

    # kernel value -> sigma and squared distances
    grad_sigma = (
        float(np.sum(g_kss * kss * dss) + np.sum(g_kqs.reshape(kqs.shape) * kqs * dqs))
        / sigma**3
    )
    g_dss = g_kss * kss * (-1.0 / (2.0 * sigma**2))
    g_dqs = g_kqs.reshape(kqs.shape) * kqs * (-1.0 / (2.0 * sigma**2))

    grads_embed = None
    if kp.embed is not None:
        s = g_dss + g_dss.T
        g_zs = 2.0 * (s.sum(axis=1)[:, None] * zs - s @ zs)
        g_zq = 2.0 * (g_dqs.sum(axis=1)[:, None] * zq - g_dqs @ zs)
        g_zs += 2.0 * (g_dqs.sum(axis=0)[:, None] * zs - g_dqs.T @ zq)
        gs, _ = gradnet.backward(tape_s, g_zs)
        gq, _ = gradnet.backward(tape_q, g_zq)
        grads_embed = gradnet.NetParams(
            [a + b for a, b in zip(gs.weights, gq.weights)],
            [a + b for a, b in zip(gs.biases, gq.biases)],
            list(gs.activations),
        )

    return loss, KernelGrads(
        log_sigma=grad_sigma * sigma,
        log_lambda=grad_lam * lam,
        embed=grads_embed,
    )


def default_params(
    episode_kind: str, input_dim: int, rng, embed_dim: int = 32, hidden: int = 40
) -> KernelParams:
    """Raw-input kernel for regression; learned embedding for classification."""
    if episode_kind == "regression":
        return KernelParams()
    net = gradnet.init_mlp(
        [input_dim, hidden, hidden, embed_dim], ["relu", "relu", "identity"], rng
    )
    return KernelParams(embed=net)
