"""Small MLP with tape-based reverse-mode differentiation.

Supplies both the MAML baseline model and the learnable embedding that
feeds the kernel inner loop. Parameters live in a :class:`NetParams`;
the canonical flat ordering is layer-major, weights before biases,
row-major within each array. All gradient consumers (cosine weights,
meta steps, finite-difference checks) rely on that ordering being
stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, TapeConsumed

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class NetParams:
    """Per-layer (weight, bias) pairs plus an activation kind per layer.

    weights[i] has shape (in_i, out_i); consecutive layers must chain,
    out_i == in_{i+1}.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionMismatch("layer lists must have equal length")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise DimensionMismatch(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionMismatch(f"layers {i-1}->{i} do not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "NetParams":
        return NetParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


def init_mlp(sizes, activations, rng) -> NetParams:
    """He-uniform init for relu layers, Xavier-uniform otherwise; zero biases."""
    if len(activations) != len(sizes) - 1:
        raise DimensionMismatch("need one activation per layer")
    ws, bs = [], []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        if act == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return NetParams(ws, bs, list(activations))


def flatten(p: NetParams) -> np.ndarray:
    parts = []
    for w, b in zip(p.weights, p.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten(v: np.ndarray, like: NetParams) -> NetParams:
    ws, bs = [], []
    pos = 0
    for w, b in zip(like.weights, like.biases):
        ws.append(v[pos : pos + w.size].reshape(w.shape).copy())
        pos += w.size
        bs.append(v[pos : pos + b.size].copy())
        pos += b.size
    if pos != v.size:
        raise DimensionMismatch(f"flat vector has {v.size} entries, expected {pos}")
    return NetParams(ws, bs, list(like.activations))


def num_params(p: NetParams) -> int:
    return sum(w.size + b.size for w, b in zip(p.weights, p.biases))


@dataclass
class Tape:
    """Saved intermediates from one forward pass; single-use."""

    params: NetParams
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    preacts: list[np.ndarray] = field(default_factory=list)  # pre-activation per layer
    consumed: bool = False


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def forward(p: NetParams, x: np.ndarray):
    """Run the net on a batch; returns (outputs, tape)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != p.in_dim:
        raise DimensionMismatch(f"input dim {x.shape[1]} != first layer {p.in_dim}")
    tape = Tape(params=p)
    h = x
    for w, b, act in zip(p.weights, p.biases, p.activations):
        tape.inputs.append(h)
        z = h @ w + b
        tape.preacts.append(z)
        h = _act(act, z)
    return h, tape


def backward(tape: Tape, upstream: np.ndarray):
    """Gradients of sum(upstream * outputs) w.r.t. params and inputs.

    Returns (grad_params, grad_inputs); consumes the tape.
    """
    if tape.consumed:
        raise TapeConsumed("tape already swept")
    tape.consumed = True
    p = tape.params
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if upstream.shape != tape.preacts[-1].shape:
        raise DimensionMismatch(
            f"upstream {upstream.shape} != outputs {tape.preacts[-1].shape}"
        )
    gw = [None] * len(p.weights)
    gb = [None] * len(p.biases)
    delta = upstream
    for i in range(len(p.weights) - 1, -1, -1):
        delta = delta * _act_grad(p.activations[i], tape.preacts[i])
        gw[i] = tape.inputs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ p.weights[i].T
    grads = NetParams(gw, gb, list(p.activations))
    return grads, delta


@dataclass
class CheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    n_params: int
    worst_index: int


def fd_check_flat(loss_grad_fn, flat: np.ndarray, step: float = 1e-5, tol: float = 1e-4) -> CheckReport:
    """Compare an analytic gradient against central finite differences.

    ``loss_grad_fn(flat) -> (loss, flat_grad)`` must be deterministic.
    The relative error is measured coordinate-wise against the FD scale.
    """
    flat = np.asarray(flat, dtype=np.float64)
    _, analytic = loss_grad_fn(flat)
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        lp, _ = loss_grad_fn(bumped)
        bumped[i] = flat[i] - step
        lm, _ = loss_grad_fn(bumped)
        fd[i] = (lp - lm) / (2.0 * step)
    # floor the denominator at a fraction of the gradient's overall scale
    # so exactly-zero partials are not judged against FD cancellation noise
    floor = 1e-3 * max(1.0, float(np.abs(analytic).max()), float(np.abs(fd).max()))
    scale = np.maximum(np.abs(fd), np.maximum(np.abs(analytic), floor))
    rel = np.abs(analytic - fd) / scale
    worst = int(np.argmax(rel))
    err = float(rel[worst])
    return CheckReport(err, tol, err < tol, flat.size, worst)


def fd_check(loss_grad_fn, p: NetParams, step: float = 1e-5, tol: float = 1e-4) -> CheckReport:
    """fd_check_flat over a NetParams, using the canonical flat order."""

    def flat_fn(v):
        return loss_grad_fn(unflatten(v, p))

    return fd_check_flat(flat_fn, flatten(p), step=step, tol=tol)
