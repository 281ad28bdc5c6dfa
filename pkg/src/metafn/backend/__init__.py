"""Numerical kernel backend selection.

The hot per-task kernels (pairwise squared distances, Cholesky
factorization and triangular solves) exist twice: a Cython extension
(``metafn.backend._speedups``) and a pure-numpy fallback
(``metafn.backend._python``). The compiled backend is used when the
extension imported successfully; set ``METAFN_BACKEND=python`` or
``METAFN_BACKEND=cython`` to force one side.

Both backends implement the same contract and raise ``ArithmeticError``
on a non-positive-definite factorization input; higher layers translate
that into :class:`metafn.errors.NotPositiveDefinite`.
"""

import os

from . import _python

try:
    from . import _speedups
except ImportError:  # pragma: no cover - depends on build environment
    _speedups = None

_forced = os.environ.get("METAFN_BACKEND", "").lower()
if _forced == "python":
    _impl = _python
elif _forced == "cython":
    if _speedups is None:
        raise ImportError("METAFN_BACKEND=cython but the extension is not built")
    _impl = _speedups
else:
    _impl = _speedups if _speedups is not None else _python

BACKEND_NAME = "cython" if _impl is _speedups and _speedups is not None else "python"

pairwise_sq_dists = _impl.pairwise_sq_dists
cholesky_lower = _impl.cholesky_lower
cho_solve = _impl.cho_solve


def available_backends():
    out = {"python": _python}
    if _speedups is not None:
        out["cython"] = _speedups
    return out
