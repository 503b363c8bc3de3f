from abc import ABC, abstractmethod

import numpy as np

from databricks.labs.cfmlab.core.params import LayerParams, ThetaBlockGrad

# upper bound on the elements of any (rows x context x d) temporary
CHUNK_ELEMENTS = 2**22


def rows_per_chunk(context: int, d: int) -> int:
    return max(1, CHUNK_ELEMENTS // max(1, context * d))


class Linearization(ABC):
    """First-order data of one layer's velocity at query rows ``X`` against context ``Z``.

    All adjoint-facing operations take a matrix ``Y`` with one covector per query row.
    """

    def __init__(self, layer: LayerParams, X: np.ndarray, Z: np.ndarray):
        self._layer = layer
        self._X = X
        self._Z = Z

    @property
    def layer(self) -> LayerParams:
        return self._layer

    @abstractmethod
    def velocity(self) -> np.ndarray:
        """Velocity at every query row, shape ``(q, d)``."""

    @abstractmethod
    def jac_x_matrices(self) -> np.ndarray:
        """Spatial Jacobians ``D_x V`` per query row, shape ``(q, d, d)``."""

    @abstractmethod
    def jac_x_t_apply(self, Y: np.ndarray) -> np.ndarray:
        """Rowwise ``D_x V(x_r)^T y_r``."""

    @abstractmethod
    def measure_pullback(self, Y: np.ndarray, row_scale: np.ndarray) -> np.ndarray:
        """For each context particle ``z_i``: ``Σ_r row_scale_r w_ri [W-Jacobian term]`` as ``(n, d)``.

        With ``row_scale_r = 1`` the term is ``(1/n) Σ_r ∇_W V[x_r](z_i)^T y_r``.
        """

    @abstractmethod
    def theta_pullback(self, Y: np.ndarray, row_scale: np.ndarray) -> ThetaBlockGrad:
        """``Σ_r row_scale_r D_θ V(x_r)^T y_r`` as one parameter-shaped block."""

    def wasserstein_jac_norms(self) -> np.ndarray:
        """Largest operator norm of the Wasserstein Jacobian over the context, per query row.

        Zero for fields that do not depend on the context.
        """
        return np.zeros(len(self._X))

