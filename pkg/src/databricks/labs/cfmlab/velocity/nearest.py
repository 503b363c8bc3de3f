"""Nearest-neighbour drift ``V(x, μ) = A (z* - x)`` with ``z*`` the closest context particle.

Forward evaluation only: the field is discontinuous in ``x`` and has no flat derivative.
"""

import numpy as np
from scipy.spatial.distance import cdist

from databricks.labs.cfmlab.core.params import LayerParams
from databricks.labs.cfmlab.velocity.base import rows_per_chunk


def nearest_indices(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Index of the closest particle per query row; ``argmin`` keeps the lowest index on ties."""
    step = rows_per_chunk(len(Z), 1)
    return np.concatenate(
        [cdist(X[start : start + step], Z).argmin(axis=1) for start in range(0, len(X), step)]
    )


def field(layer: LayerParams, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    return (Z[nearest_indices(X, Z)] - X) @ layer["A"].T
