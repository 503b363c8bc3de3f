"""Single-head softmax self-attention velocity ``V(x, μ) = V U(x)``.

``U(x)`` is the softmax-weighted mean of the context and ``M(x)`` the weighted centered
second moment; logits are ``<Qx, Kz>``. Every softmax is computed with the row maximum
subtracted, and rows are processed in chunks so that no ``(rows, n, d)`` temporary
exceeds :data:`CHUNK_ELEMENTS`.
"""

import numpy as np
from scipy.special import logsumexp

from databricks.labs.cfmlab.core.params import LayerParams, ThetaBlockGrad
from databricks.labs.cfmlab.velocity.base import Linearization, rows_per_chunk


def _log_normalizers(qx: np.ndarray, kz: np.ndarray) -> np.ndarray:
    return logsumexp(qx @ kz.T, axis=1)


def attention_mean(layer: LayerParams, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    qx = X @ layer["Q"].T
    kz = Z @ layer["K"].T
    mean = np.empty_like(X)
    step = rows_per_chunk(len(Z), 1)
    for start in range(0, len(X), step):
        logits = qx[start : start + step] @ kz.T
        logits -= logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=1, keepdims=True)
        mean[start : start + step] = weights @ Z
    return mean


def field(layer: LayerParams, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    return attention_mean(layer, X, Z) @ layer["V"].T


def kernel_form(layer: LayerParams, x: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``ℱ(∫F dμ)`` with ``F(x, y) = (e^{<Qx,Ky>} V y, e^{<Qx,Ky>})`` and ``ℱ(w) = w[:d] / w[d]``."""
    logits = (Z @ layer["K"].T) @ (layer["Q"] @ x)
    scaled = np.exp(logits - logits.max())
    features = np.hstack([scaled[:, None] * (Z @ layer["V"].T), scaled[:, None]])
    integral = features.mean(axis=0)
    return integral[:-1] / integral[-1]


class AttentionLinearization(Linearization):
    def __init__(self, layer: LayerParams, X: np.ndarray, Z: np.ndarray):
        super().__init__(layer, X, Z)
        self._qx = X @ layer["Q"].T
        self._kz = Z @ layer["K"].T
        self._lse = _log_normalizers(self._qx, self._kz) if len(Z) * len(X) <= 2**24 else self._chunked_lse()
        q, d = X.shape
        self._mean = np.empty((q, d))
        self._moment = np.empty((q, d, d))
        step = rows_per_chunk(len(Z), d)
        for start in range(0, q, step):
            rows = slice(start, start + step)
            weights = self._weights(rows)
            mean = weights @ Z
            centered = Z[None, :, :] - mean[:, None, :]
            self._mean[rows] = mean
            self._moment[rows] = np.einsum("rn,rni,rnj->rij", weights, centered, centered)
        # c_r = K^T Q x_r
        self._key_query = self._qx @ layer["K"]

    def _chunked_lse(self) -> np.ndarray:
        step = rows_per_chunk(len(self._Z), 1)
        return np.concatenate(
            [_log_normalizers(self._qx[start : start + step], self._kz) for start in range(0, len(self._X), step)]
        )

    def _weights(self, rows: slice) -> np.ndarray:
        return np.exp(self._qx[rows] @ self._kz.T - self._lse[rows, None])

    @property
    def mean(self) -> np.ndarray:
        return self._mean

    @property
    def moment(self) -> np.ndarray:
        return self._moment

    def velocity(self) -> np.ndarray:
        return self._mean @ self._layer["V"].T

    def jac_x_matrices(self) -> np.ndarray:
        layer = self._layer
        return layer["V"] @ self._moment @ (layer["K"].T @ layer["Q"])

    def jac_x_t_apply(self, Y: np.ndarray) -> np.ndarray:
        layer = self._layer
        pulled = np.einsum("rij,rj->ri", self._moment, Y @ layer["V"])
        return pulled @ (layer["K"].T @ layer["Q"])

    def measure_pullback(self, Y: np.ndarray, row_scale: np.ndarray) -> np.ndarray:
        Z = self._Z
        b = row_scale[:, None] * (Y @ self._layer["V"])
        offsets = np.einsum("ri,ri->r", self._mean, b)
        result = np.zeros_like(Z)
        step = rows_per_chunk(len(Z), Z.shape[1])
        for start in range(0, len(self._X), step):
            rows = slice(start, start + step)
            weights_t = self._weights(rows).T
            # s_ir = (z_i - U_r) . b_r
            projections = Z @ b[rows].T - offsets[rows][None, :]
            result += (weights_t * projections) @ self._key_query[rows] + weights_t @ b[rows]
        return result

    def theta_pullback(self, Y: np.ndarray, row_scale: np.ndarray) -> ThetaBlockGrad:
        layer = self._layer
        v = row_scale[:, None] * Y
        pulled = np.einsum("rij,rj->ri", self._moment, v @ layer["V"])
        return ThetaBlockGrad(
            layer.family,
            {
                "Q": layer["K"] @ (pulled.T @ self._X),
                "K": layer["Q"] @ (self._X.T @ pulled),
                "V": v.T @ self._mean,
            },
        )

    def flat_derivative(self, row: int, z: np.ndarray) -> np.ndarray:
        """``α(x_r, z) V (z - U(x_r))`` for the query row ``row``."""
        alpha = self._alpha(row, z)
        return alpha * (self._layer["V"] @ (z - self._mean[row]))

    def wasserstein_jac(self, row: int, z: np.ndarray) -> np.ndarray:
        """``α(x_r, z) [V (z - U(x_r)) (K^T Q x_r)^T + V]``."""
        V = self._layer["V"]
        alpha = self._alpha(row, z)
        return alpha * (np.outer(V @ (z - self._mean[row]), self._key_query[row]) + V)

    def wasserstein_jac_norms(self) -> np.ndarray:
        V = self._layer["V"]
        Z = self._Z
        n, d = Z.shape
        out = np.empty(len(self._X))
        step = rows_per_chunk(n, d * d)
        for start in range(0, len(self._X), step):
            rows = slice(start, start + step)
            alpha = n * self._weights(rows)
            shifted = (Z[None, :, :] - self._mean[rows][:, None, :]) @ V.T
            jacs = shifted[..., :, None] * self._key_query[rows][:, None, None, :] + V
            jacs *= alpha[..., None, None]
            out[rows] = np.linalg.norm(jacs, ord=2, axis=(-2, -1)).max(axis=1)
        return out

    def _alpha(self, row: int, z: np.ndarray) -> float:
        logit = self._qx[row] @ (self._layer["K"] @ z)
        return float(len(self._Z) * np.exp(logit - self._lse[row]))
