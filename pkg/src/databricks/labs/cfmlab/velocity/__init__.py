"""Velocity families and their derivative objects.

Single-point operations take a token ``x`` and an :class:`Ensemble`. The flow and adjoint
solvers work on the stacked state ``P = [x; z_1; ...; z_n]`` through :func:`velocity_field`
and :func:`linearize`.
"""

import numpy as np

from databricks.labs.cfmlab.core.ensemble import Ensemble
from databricks.labs.cfmlab.core.params import Family, LayerParams, ThetaBlockGrad
from databricks.labs.cfmlab.errors import ConfigError, UnsupportedFamilyError
from databricks.labs.cfmlab.velocity import attention, mlp, nearest
from databricks.labs.cfmlab.velocity.attention import AttentionLinearization
from databricks.labs.cfmlab.velocity.base import Linearization
from databricks.labs.cfmlab.velocity.mlp import GELU_ALPHA, MlpLinearization

__all__ = [
    "GELU_ALPHA",
    "Linearization",
    "eval_velocity",
    "flat_derivative",
    "jac_theta_transpose_apply",
    "jac_x",
    "kernel_form_eval",
    "linearize",
    "velocity_field",
    "wasserstein_jac",
]


def _point(layer: LayerParams, x: np.ndarray, mu: Ensemble) -> np.ndarray:
    point = np.asarray(x, dtype=np.float64).reshape(-1)
    if point.shape[0] != layer.dimension or mu.dimension != layer.dimension:
        msg = f"dimension mismatch: layer d={layer.dimension}, x d={point.shape[0]}, context d={mu.dimension}"
        raise ConfigError(msg)
    return point


def _require_differentiable(layer: LayerParams, what: str):
    if not layer.family.differentiable:
        msg = f"{what} is not defined for the {layer.family.value} family"
        raise UnsupportedFamilyError(msg)


def _require_attention(layer: LayerParams, what: str):
    if layer.family is not Family.ATTENTION:
        msg = f"{what} is defined for the attention family only, got {layer.family.value}"
        raise UnsupportedFamilyError(msg)


def velocity_field(layer: LayerParams, P: np.ndarray) -> np.ndarray:
    """Velocity at every row of the stacked state; the context is ``P[1:]``."""
    Z = P[1:]
    if layer.family is Family.ATTENTION:
        return attention.field(layer, P, Z)
    if layer.family is Family.MLP:
        return mlp.field(layer, P)
    out = np.zeros_like(P)
    # every particle is its own nearest neighbour
    out[:1] = nearest.field(layer, P[:1], Z)
    return out


def linearize(layer: LayerParams, X: np.ndarray, Z: np.ndarray) -> Linearization:
    _require_differentiable(layer, "linearization")
    if layer.family is Family.ATTENTION:
        return AttentionLinearization(layer, X, Z)
    return MlpLinearization(layer, X, Z)


def eval_velocity(layer: LayerParams, x: np.ndarray, mu: Ensemble) -> np.ndarray:
    point = _point(layer, x, mu)[None, :]
    Z = mu.particles
    if layer.family is Family.ATTENTION:
        return attention.field(layer, point, Z)[0]
    if layer.family is Family.MLP:
        return mlp.field(layer, point)[0]
    return nearest.field(layer, point, Z)[0]


def flat_derivative(layer: LayerParams, x: np.ndarray, mu: Ensemble, z: np.ndarray) -> np.ndarray:
    point = _point(layer, x, mu)
    _require_differentiable(layer, "flat derivative")
    if layer.family is Family.MLP:
        return np.zeros_like(point)
    return AttentionLinearization(layer, point[None, :], mu.particles).flat_derivative(0, np.asarray(z, dtype=float))


def jac_x(layer: LayerParams, x: np.ndarray, mu: Ensemble) -> np.ndarray:
    point = _point(layer, x, mu)
    return linearize(layer, point[None, :], mu.particles).jac_x_matrices()[0]


def wasserstein_jac(layer: LayerParams, x: np.ndarray, mu: Ensemble, z: np.ndarray) -> np.ndarray:
    point = _point(layer, x, mu)
    _require_differentiable(layer, "Wasserstein Jacobian")
    if layer.family is Family.MLP:
        return np.zeros((layer.dimension, layer.dimension))
    return AttentionLinearization(layer, point[None, :], mu.particles).wasserstein_jac(0, np.asarray(z, dtype=float))


def jac_theta_transpose_apply(layer: LayerParams, x: np.ndarray, mu: Ensemble, p: np.ndarray) -> ThetaBlockGrad:
    """Block ``G`` with ``<G, Δθ> = <p, D_θV Δθ>`` for every direction ``Δθ``."""
    point = _point(layer, x, mu)
    covector = np.asarray(p, dtype=np.float64).reshape(1, -1)
    return linearize(layer, point[None, :], mu.particles).theta_pullback(covector, np.ones(1))


def kernel_form_eval(layer: LayerParams, x: np.ndarray, mu: Ensemble) -> np.ndarray:
    point = _point(layer, x, mu)
    _require_attention(layer, "kernel form")
    return attention.kernel_form(layer, point, mu.particles)
