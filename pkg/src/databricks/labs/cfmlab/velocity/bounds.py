"""Dimension-free derivative bounds for the attention and MLP fields, and the measured norms
they are audited against.

Bounds assume every parameter block has Frobenius norm at most ``M`` and every point lies
in the closed ball of radius ``R``.
"""

import math
from dataclasses import dataclass

import numpy as np

from databricks.labs.cfmlab.core.ensemble import Ensemble
from databricks.labs.cfmlab.core.params import Family, LayerParams
from databricks.labs.cfmlab.errors import UnsupportedFamilyError
from databricks.labs.cfmlab.velocity import jac_theta_transpose_apply, jac_x
from databricks.labs.cfmlab.velocity.mlp import GELU_ALPHA


@dataclass(frozen=True)
class TheoreticalBound:
    name: str
    family: str
    value: float
    source: str


def attention_bounds(M: float, R: float) -> list[TheoreticalBound]:
    spread = 2.0 * M * M * R * R
    family = Family.ATTENTION.value
    return [
        TheoreticalBound(
            "jac_x", family, 4.0 * M**3 * R**2, "|V| |M(x)| |K^T Q| with |M(x)| <= 4R^2"
        ),
        TheoreticalBound(
            "wasserstein_jac",
            family,
            math.exp(spread) * M * (spread + 1.0),
            "relative density <= exp(2M^2R^2) times |V(z-U)(K^T Q x)^T + V|",
        ),
        TheoreticalBound(
            "jac_theta", family, R * (1.0 + 8.0 * M * M * R * R), "|D_V| <= R plus |D_Q|, |D_K| <= 4M^2R^3"
        ),
        TheoreticalBound(
            "jac_x_second", family, 8.0 * M**5 * R**3, "third weighted central moment <= 8R^3 times |V| |K^T Q|^2"
        ),
    ]


def mlp_bounds(M: float, R: float, alpha: float = GELU_ALPHA) -> list[TheoreticalBound]:
    family = Family.MLP.value
    return [
        TheoreticalBound("jac_x", family, alpha * M * M, "|W1| sup|σ'| |W2|"),
        TheoreticalBound(
            "jac_theta",
            family,
            alpha * (M * R + M + 1.0) + M * alpha * R + M * alpha,
            "sum of the W1, W2 and b block bounds",
        ),
        TheoreticalBound("jac_x_second", family, alpha * M**3, "|W1| sup|σ''| |W2|^2"),
    ]


def family_bounds(family: Family | str, M: float, R: float) -> list[TheoreticalBound]:
    family = Family(family)
    if family is Family.ATTENTION:
        return attention_bounds(M, R)
    if family is Family.MLP:
        return mlp_bounds(M, R)
    msg = f"no derivative bounds for the {family.value} family"
    raise UnsupportedFamilyError(msg)


def support_bound(theta_linf: float, R: float) -> float:
    """Radius ``e^{|θ|_{L∞}} R`` containing the context support at every depth."""
    return math.exp(theta_linf) * R


def discrete_support_bound(theta_linf: float, R: float, h: float) -> float:
    return support_bound(theta_linf, R) * (1.0 + 10.0 * h)


def theta_jacobian(layer: LayerParams, x: np.ndarray, mu: Ensemble) -> np.ndarray:
    """Matrix of ``D_θV`` with respect to the flattened blocks, shape ``(d, p)``.

    Row ``j`` is the pullback of the ``j``-th basis covector.
    """
    basis = np.eye(layer.dimension)
    return np.stack([jac_theta_transpose_apply(layer, x, mu, e).flatten() for e in basis])


def operator_norm(matrix: np.ndarray) -> float:
    return float(np.linalg.norm(matrix, 2))


def second_derivative_norm(
    layer: LayerParams, x: np.ndarray, mu: Ensemble, direction: np.ndarray, epsilon: float = 1e-5
) -> float:
    """``|D²_x V [u]|`` along the unit vector ``u`` by central differences of ``D_x V``."""
    u = direction / np.linalg.norm(direction)
    forward = jac_x(layer, x + epsilon * u, mu)
    backward = jac_x(layer, x - epsilon * u, mu)
    return operator_norm((forward - backward) / (2.0 * epsilon))
