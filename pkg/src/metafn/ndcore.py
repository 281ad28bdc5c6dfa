"""Dense linear algebra used by every other module.

Matrices and vectors are plain float64 numpy arrays. Constructors here
(`as_matrix`, `as_vector`) validate shape and finiteness; the heavy
kernels (Cholesky, triangular solves, pairwise distances) live in
:mod:`metafn.backend` with a compiled and a pure-Python implementation.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .errors import DimensionMismatch, LengthMismatch, NotPositiveDefinite

SYMMETRY_RTOL = 1e-10
ZERO_NORM_EPS = 1e-12


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d array, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf")
    return a


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"expected a 1-d array, got ndim={v.ndim}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains NaN or Inf")
    return v


def _check_symmetric(a: np.ndarray) -> np.ndarray:
    """Verify symmetry to within SYMMETRY_RTOL and absorb round-off."""
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"matrix is {a.shape}, not square")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > SYMMETRY_RTOL * scale:
        raise DimensionMismatch("matrix is not symmetric within tolerance")
    return (a + a.T) / 2.0


def cholesky(a) -> np.ndarray:
    """Lower-triangular factor L with L @ L.T == a.

    Raises NotPositiveDefinite when the (symmetrized) input has a
    non-positive pivot — typically a too-small ridge weight or a
    degenerate support set.
    """
    a = _check_symmetric(as_matrix(a))
    try:
        return backend.cholesky_lower(a)
    except ArithmeticError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def solve_regularized(k, lam: float, y):
    """Solve (K + lam*I) alpha = y via Cholesky.

    ``y`` may be a vector or a matrix of stacked targets (one column per
    output). ``lam`` must be positive.
    """
    k = as_matrix(k)
    y = np.asarray(y, dtype=np.float64)
    if lam <= 0:
        raise ValueError(f"ridge weight must be positive, got {lam}")
    if y.shape[0] != k.shape[0]:
        raise LengthMismatch(f"targets have length {y.shape[0]}, matrix is {k.shape}")
    m = _check_symmetric(k) + lam * np.eye(k.shape[0])
    try:
        lower = backend.cholesky_lower(m)
    except ArithmeticError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return backend.cho_solve(lower, y)


def solve_adjoint(k, lam: float, alpha, upstream):
    """Reverse-mode rule for ``alpha = (K + lam*I)^{-1} y``.

    Given ``upstream = dJ/d alpha``, returns ``(grad_k, grad_lam, grad_y)``
    where ``v`` solves ``(K + lam*I) v = upstream``:

        grad_y = v
        grad_k = -sym(v alpha^T)
        grad_lam = -v . alpha

    ``alpha``/``upstream`` may be matrices of stacked columns; the K and
    lambda gradients then sum over columns.
    """
    k = as_matrix(k)
    alpha = np.asarray(alpha, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if alpha.shape != upstream.shape:
        raise LengthMismatch("alpha and upstream shapes differ")
    v = solve_regularized(k, lam, upstream)
    a2 = alpha.reshape(alpha.shape[0], -1)
    v2 = v.reshape(v.shape[0], -1)
    gk = -(v2 @ a2.T)
    gk = (gk + gk.T) / 2.0
    glam = -float(np.sum(v2 * a2))
    return gk, glam, v


def cosine(a, b) -> float:
    """Cosine similarity in [-1, 1]; near-zero-norm inputs give 0."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape[0] != b.shape[0]:
        raise LengthMismatch(f"lengths {a.shape[0]} and {b.shape[0]} differ")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    c = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, c))
