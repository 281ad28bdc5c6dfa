"""Pure-numpy fallback for the compiled kernels.

Same contract as ``_speedups``: float64 C-contiguous in, float64 out,
``ArithmeticError`` when a Cholesky input is not positive definite.
"""

import numpy as np


def pairwise_sq_dists(a, b):
    """Squared Euclidean distances between rows of ``a`` and rows of ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    # einsum keeps everything in one pass; clamp tiny negatives from round-off
    return np.maximum(d, 0.0)


def cholesky_lower(a):
    """Lower-triangular Cholesky factor of a symmetric PD matrix."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError("matrix is not positive definite") from exc


def cho_solve(lower, b):
    """Solve A x = b given the lower Cholesky factor of A.

    ``b`` may be a vector or a matrix of stacked right-hand sides.
    """
    lower = np.asarray(lower, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    z = np.linalg.solve(lower, b)
    return np.linalg.solve(lower.T, z)
