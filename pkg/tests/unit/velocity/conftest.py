import numpy as np
import pytest

from databricks.labs.cfmlab.core.ensemble import Ensemble
from databricks.labs.cfmlab.core.params import Family, LayerParams

EPSILON = 1e-5


def rel_error(actual, expected, floor: float = 1e-6) -> float:
    actual, expected = np.asarray(actual), np.asarray(expected)
    return float(np.max(np.abs(actual - expected)) / max(float(np.max(np.abs(expected))), floor))


def central(fn, point: np.ndarray, epsilon: float = EPSILON) -> np.ndarray:
    """Columns are the central differences of ``fn`` along each coordinate of ``point``."""
    columns = []
    for j in range(point.size):
        step = np.zeros_like(point)
        step[j] = epsilon
        columns.append((np.asarray(fn(point + step)) - np.asarray(fn(point - step))) / (2 * epsilon))
    return np.stack(columns, axis=-1)


def draw(family: Family, d: int, n: int, seed: int, scale: float = 1.0):
    generator = np.random.default_rng(seed)
    layer = LayerParams.random(family, d, generator, scale)
    x = 0.5 * generator.standard_normal(d)
    mu = Ensemble(0.5 * generator.standard_normal((n, d)))
    return layer, x, mu


@pytest.fixture
def attention_instance():
    return draw(Family.ATTENTION, 3, 5, 0)


@pytest.fixture
def mlp_instance():
    return draw(Family.MLP, 3, 5, 1)
