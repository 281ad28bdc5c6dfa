"""Few-shot meta-learning with a closed-form kernel inner loop,
cosine-weighted outer aggregation, and MAML baselines."""

from .backend import BACKEND_NAME

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "__version__"]
