import numpy as np
import pytest

from metafn import backend


@pytest.fixture(params=sorted(backend.available_backends()))
def any_backend(request, monkeypatch):
    """Run the test under each available numerical backend."""
    impl = backend.available_backends()[request.param]
    monkeypatch.setattr(backend, "pairwise_sq_dists", impl.pairwise_sq_dists)
    monkeypatch.setattr(backend, "cholesky_lower", impl.cholesky_lower)
    monkeypatch.setattr(backend, "cho_solve", impl.cho_solve)
    return request.param


def random_spd(n, rng, jitter=1e-3):
    a = rng.standard_normal((n, n))
    return a @ a.T + jitter * n * np.eye(n)
