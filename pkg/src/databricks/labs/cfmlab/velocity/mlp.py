"""Two-layer perceptron velocity ``V(x) = W1 σ(W2 x + b)`` with the exact erf-form GELU.

The first matrix is the weight matrix ``W1``; the field does not depend on the context.
"""

import numpy as np
from scipy.special import ndtr

from databricks.labs.cfmlab.core.params import LayerParams, ThetaBlockGrad
from databricks.labs.cfmlab.velocity.base import Linearization

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(t: np.ndarray) -> np.ndarray:
    return t * ndtr(t)


def _density(t: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * t * t)


def gelu_prime(t: np.ndarray) -> np.ndarray:
    return ndtr(t) + t * _density(t)


# sup |σ'| is attained where σ'' vanishes, at t = √2
GELU_ALPHA = float(gelu_prime(np.sqrt(2.0)))


def field(layer: LayerParams, X: np.ndarray) -> np.ndarray:
    return gelu(X @ layer["W2"].T + layer["b"]) @ layer["W1"].T


class MlpLinearization(Linearization):
    def __init__(self, layer: LayerParams, X: np.ndarray, Z: np.ndarray):
        super().__init__(layer, X, Z)
        pre = X @ layer["W2"].T + layer["b"]
        self._activation = gelu(pre)
        self._slope = gelu_prime(pre)

    def velocity(self) -> np.ndarray:
        return self._activation @ self._layer["W1"].T

    def jac_x_matrices(self) -> np.ndarray:
        layer = self._layer
        return np.einsum("ik,rk,kj->rij", layer["W1"], self._slope, layer["W2"])

    def jac_x_t_apply(self, Y: np.ndarray) -> np.ndarray:
        return (self._slope * (Y @ self._layer["W1"])) @ self._layer["W2"]

    def measure_pullback(self, Y: np.ndarray, row_scale: np.ndarray) -> np.ndarray:
        return np.zeros_like(self._Z)

    def theta_pullback(self, Y: np.ndarray, row_scale: np.ndarray) -> ThetaBlockGrad:
        v = row_scale[:, None] * Y
        pulled = self._slope * (v @ self._layer["W1"])
        return ThetaBlockGrad(
            self._layer.family,
            {
                "W1": v.T @ self._activation,
                "W2": pulled.T @ self._X,
                "b": pulled.sum(axis=0),
            },
        )
