import numpy as np
import pytest

from databricks.labs.cfmlab.core.ensemble import Ensemble
from databricks.labs.cfmlab.core.params import Family, LayerParams
from databricks.labs.cfmlab.errors import UnsupportedFamilyError
from databricks.labs.cfmlab.velocity import (
    eval_velocity,
    flat_derivative,
    jac_theta_transpose_apply,
    jac_x,
    linearize,
    wasserstein_jac,
)
from databricks.labs.cfmlab.velocity.attention import AttentionLinearization
from databricks.labs.cfmlab.velocity.bounds import operator_norm

from .conftest import central, draw, rel_error

CASES = [(family, d, n) for family in (Family.ATTENTION, Family.MLP) for d in (2, 3, 5) for n in (1, 2, 8)]


def _mixture_velocity(layer: LayerParams, x: np.ndarray, Z: np.ndarray, z: np.ndarray, epsilon: float):
    """Attention velocity against ``(1 - ε) μ + ε δ_z``."""
    points = np.vstack([Z, z])
    masses = np.append(np.full(len(Z), (1 - epsilon) / len(Z)), epsilon)
    logits = points @ layer["K"].T @ (layer["Q"] @ x)
    weights = masses * np.exp(logits - logits.max())
    return layer["V"] @ (weights @ points / weights.sum())


@pytest.mark.parametrize("family,d,n", CASES)
def test_jac_x_matches_finite_differences(family, d, n):
    layer, x, mu = draw(family, d, n, 100 + d * 10 + n)
    expected = central(lambda point: eval_velocity(layer, point, mu), x)
    assert rel_error(jac_x(layer, x, mu), expected) <= 1e-6


@pytest.mark.parametrize("family,d,n", CASES)
def test_theta_pullback_matches_finite_differences(family, d, n):
    layer, x, mu = draw(family, d, n, 200 + d * 10 + n)
    p = np.random.default_rng(d * n).standard_normal(d)
    flat = layer.flatten()

    def pairing(values: np.ndarray) -> float:
        return float(p @ eval_velocity(LayerParams.from_flat(family, d, values), x, mu))

    expected = central(pairing, flat)
    assert rel_error(jac_theta_transpose_apply(layer, x, mu, p).flatten(), expected) <= 1e-5


@pytest.mark.parametrize("d,n", [(2, 1), (3, 5), (5, 8)])
def test_flat_derivative_matches_mass_perturbation(d, n):
    layer, x, mu = draw(Family.ATTENTION, d, n, 300 + d + n)
    z = 0.5 * np.random.default_rng(n).standard_normal(d)
    epsilon = 1e-5
    expected = (
        _mixture_velocity(layer, x, mu.particles, z, epsilon) - _mixture_velocity(layer, x, mu.particles, z, -epsilon)
    ) / (2 * epsilon)
    assert rel_error(flat_derivative(layer, x, mu, z), expected) <= 1e-6


@pytest.mark.parametrize("d,n", [(2, 1), (3, 5), (5, 8)])
def test_wasserstein_jac_is_gradient_of_flat_derivative(d, n):
    layer, x, mu = draw(Family.ATTENTION, d, n, 400 + d + n)
    z = 0.5 * np.random.default_rng(d).standard_normal(d)
    expected = central(lambda point: flat_derivative(layer, x, mu, point), z)
    assert rel_error(wasserstein_jac(layer, x, mu, z), expected) <= 1e-6


def test_wasserstein_jac_moves_one_particle():
    layer, x, mu = draw(Family.ATTENTION, 3, 6, 500)

    def moved(point: np.ndarray) -> np.ndarray:
        particles = mu.particles.copy()
        particles[2] = point
        return eval_velocity(layer, x, Ensemble(particles))

    expected = central(moved, mu.particles[2])
    assert rel_error(wasserstein_jac(layer, x, mu, mu.particles[2]) / mu.n, expected) <= 1e-6


def test_flat_derivative_vanishes_at_attention_mean():
    layer, x, mu = draw(Family.ATTENTION, 3, 6, 501)
    mean = AttentionLinearization(layer, x[None, :], mu.particles).mean[0]
    assert np.allclose(flat_derivative(layer, x, mu, mean), 0.0, atol=1e-14)


def test_single_particle_has_zero_spatial_jacobian():
    layer, x, mu = draw(Family.ATTENTION, 3, 1, 502)
    assert np.allclose(jac_x(layer, x, mu), 0.0, atol=1e-14)


def test_origin_token_collapses_wasserstein_jac():
    layer, _, mu = draw(Family.ATTENTION, 3, 4, 503)
    x = np.zeros(3)
    z = np.array([0.1, 0.2, -0.3])
    # at x = 0 every logit is 0 and α(0, z) = 1
    assert np.allclose(wasserstein_jac(layer, x, mu, z), layer["V"], atol=1e-14)


def test_mlp_has_no_measure_derivatives(mlp_instance):
    layer, x, mu = mlp_instance
    z = np.ones(3)
    assert not flat_derivative(layer, x, mu, z).any()
    assert not wasserstein_jac(layer, x, mu, z).any()


def test_zero_covector_gives_zero_block(attention_instance):
    layer, x, mu = attention_instance
    block = jac_theta_transpose_apply(layer, x, mu, np.zeros(3))
    assert block.family is Family.ATTENTION
    assert not block.flatten().any()


def test_zero_query_closed_form():
    layer, x, mu = draw(Family.ATTENTION, 3, 5, 504)
    layer = LayerParams(Family.ATTENTION, {"Q": np.zeros((3, 3)), "K": layer["K"], "V": layer["V"]})
    p = np.array([1.0, -2.0, 0.5])
    centered = mu.particles - mu.mean()
    moment = centered.T @ centered / mu.n
    block = jac_theta_transpose_apply(layer, x, mu, p)
    assert np.allclose(block["V"], np.outer(p, mu.mean()), atol=1e-14)
    assert np.allclose(block["Q"], np.outer(layer["K"] @ moment @ layer["V"].T @ p, x), atol=1e-14)


def test_permutation_invariance_of_derivatives(attention_instance):
    layer, x, mu = attention_instance
    shuffled = mu.permuted(np.array([4, 2, 0, 3, 1]))
    p = np.array([0.3, 0.1, -0.7])
    assert np.allclose(jac_x(layer, x, mu), jac_x(layer, x, shuffled), atol=1e-14)
    assert np.allclose(
        jac_theta_transpose_apply(layer, x, mu, p).flatten(),
        jac_theta_transpose_apply(layer, x, shuffled, p).flatten(),
        atol=1e-14,
    )


@pytest.mark.parametrize("operation", [jac_x, flat_derivative, wasserstein_jac, jac_theta_transpose_apply])
def test_nearest_has_no_derivatives(operation):
    layer = LayerParams(Family.NEAREST, {"A": np.eye(2)})
    mu = Ensemble(np.ones((2, 2)))
    args = (layer, np.zeros(2), mu) if operation is jac_x else (layer, np.zeros(2), mu, np.ones(2))
    with pytest.raises(UnsupportedFamilyError):
        operation(*args)


def test_attention_weights_and_moment(attention_instance):
    layer, x, mu = attention_instance
    lin = AttentionLinearization(layer, x[None, :], mu.particles)
    moment = lin.moment[0]
    assert np.allclose(moment, moment.T, atol=1e-12)
    assert np.linalg.eigvalsh(moment).min() >= -1e-10
    assert np.linalg.norm(moment, 2) <= 4 * mu.max_norm() ** 2


def test_wasserstein_jac_norms_take_the_worst_context_particle():
    layer, _, mu = draw(Family.ATTENTION, 3, 6, 31)
    X = np.random.default_rng(31).standard_normal((4, 3))
    lin = linearize(layer, X, mu.particles)
    expected = [max(operator_norm(lin.wasserstein_jac(r, z)) for z in mu.particles) for r in range(len(X))]
    assert np.allclose(lin.wasserstein_jac_norms(), expected, rtol=1e-12, atol=1e-14)


def test_mlp_wasserstein_jac_norms_vanish(mlp_instance):
    layer, x, mu = mlp_instance
    assert np.array_equal(linearize(layer, x[None, :], mu.particles).wasserstein_jac_norms(), np.zeros(1))
