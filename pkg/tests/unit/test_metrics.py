import itertools

import numpy as np
import pytest

from databricks.labs.cfmlab.core.ensemble import Ensemble
from databricks.labs.cfmlab.core.rng import RngHandle
from databricks.labs.cfmlab.errors import ConfigError, DegenerateRateError, TransportSizeError
from databricks.labs.cfmlab.metrics import (
    exact_w1_feasible,
    fit_rate,
    per_n_stats,
    w1_exact,
    w1_sliced,
)


def _permutation_oracle(a: np.ndarray, b: np.ndarray) -> float:
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    n = len(a)
    return min(float(cost[range(n), list(order)].mean()) for order in itertools.permutations(range(n)))


def test_identical_ensembles_in_any_order():
    a = Ensemble(np.random.default_rng(0).standard_normal((7, 3)))
    distance, _ = w1_exact(a, a.permuted(np.array([6, 5, 4, 3, 2, 1, 0])))
    assert distance == pytest.approx(0.0, abs=1e-12)


def test_singletons():
    distance, plan = w1_exact(Ensemble(np.array([[0.0, 0.0]])), Ensemble(np.array([[3.0, 4.0]])))
    assert distance == pytest.approx(5.0)
    assert plan.flows == [(0, 0, 1.0)]


def test_one_dimensional_quantile_coupling():
    distance, _ = w1_exact(Ensemble(np.array([[0.0], [1.0]])), Ensemble(np.array([[0.5]])))
    assert distance == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(30))
def test_matches_permutation_oracle(seed):
    generator = np.random.default_rng(seed)
    n = 1 + seed % 6
    a, b = generator.standard_normal((n, 2)), generator.standard_normal((n, 2))
    distance, _ = w1_exact(Ensemble(a), Ensemble(b))
    assert abs(distance - _permutation_oracle(a, b)) <= 1e-10


def test_plan_marginals_and_cost():
    generator = np.random.default_rng(1)
    a, b = Ensemble(generator.standard_normal((4, 2))), Ensemble(generator.standard_normal((6, 2)))
    distance, plan = w1_exact(a, b)
    rows, cols = plan.marginals()
    assert np.allclose(rows, 1 / 4, atol=1e-12)
    assert np.allclose(cols, 1 / 6, atol=1e-12)
    assert all(mass >= 0 for _, _, mass in plan.flows)
    recomputed = sum(mass * np.linalg.norm(a.particles[i] - b.particles[j]) for i, j, mass in plan.flows)
    assert recomputed == pytest.approx(distance, abs=1e-12)
    assert plan.cost == distance


def test_metric_axioms():
    generator = np.random.default_rng(2)
    for _ in range(50):
        a, b, c = (Ensemble(generator.standard_normal((generator.integers(2, 9), 2))) for _ in range(3))
        ab, _ = w1_exact(a, b)
        ba, _ = w1_exact(b, a)
        ac, _ = w1_exact(a, c)
        cb, _ = w1_exact(c, b)
        assert abs(ab - ba) <= 1e-10
        assert ab <= ac + cb + 1e-9


def test_translation_invariance():
    generator = np.random.default_rng(3)
    a, b = generator.standard_normal((5, 3)), generator.standard_normal((8, 3))
    shift = np.array([10.0, -3.0, 0.5])
    before, _ = w1_exact(Ensemble(a), Ensemble(b))
    after, _ = w1_exact(Ensemble(a + shift), Ensemble(b + shift))
    assert abs(before - after) <= 1e-10


def test_size_cap():
    assert exact_w1_feasible(2048, 2048)
    assert not exact_w1_feasible(4096, 2048)
    big = Ensemble(np.zeros((4097, 1)))
    with pytest.raises(TransportSizeError, match="w1_sliced"):
        w1_exact(big, Ensemble(np.zeros((1024, 1))))


def test_dimension_mismatch():
    with pytest.raises(ConfigError):
        w1_exact(Ensemble(np.zeros((2, 2))), Ensemble(np.zeros((2, 3))))


def test_sliced_identical_is_zero():
    a = Ensemble(np.random.default_rng(4).standard_normal((9, 3)))
    assert w1_sliced(a, a, 16, RngHandle(0)) == pytest.approx(0.0, abs=1e-12)


def test_sliced_equals_exact_in_one_dimension():
    generator = np.random.default_rng(5)
    a, b = Ensemble(generator.standard_normal((7, 1))), Ensemble(generator.standard_normal((11, 1)))
    exact, _ = w1_exact(a, b)
    assert w1_sliced(a, b, 8, RngHandle(5)) == pytest.approx(exact, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_sliced_is_a_lower_bound(seed):
    generator = np.random.default_rng(seed)
    a, b = Ensemble(generator.standard_normal((32, 3))), Ensemble(generator.standard_normal((64, 3)))
    exact, _ = w1_exact(a, b)
    assert w1_sliced(a, b, 128, RngHandle(seed)) <= exact + 1e-9


def test_sliced_is_deterministic():
    generator = np.random.default_rng(6)
    a, b = Ensemble(generator.standard_normal((10, 2))), Ensemble(generator.standard_normal((10, 2)))
    assert w1_sliced(a, b, 32, RngHandle(1)) == w1_sliced(a, b, 32, RngHandle(1))


def test_sliced_needs_projections():
    a = Ensemble(np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        w1_sliced(a, a, 0, RngHandle(0))


def test_exact_power_law():
    fit = fit_rate([(n, 3.0 * n**-0.5) for n in (16, 64, 256)])
    assert fit.slope == pytest.approx(-0.5)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.predict(64) == pytest.approx(3.0 / 8)


def test_constant_values():
    fit = fit_rate([(n, 0.25) for n in (16, 32, 64)])
    assert fit.slope == pytest.approx(0.0, abs=1e-12)


def test_noisy_power_law():
    sizes = [16, 32, 64, 128, 256, 512]
    fit = fit_rate([(n, n ** (-1 / 3) * (1 + 0.01 * (-1) ** i)) for i, n in enumerate(sizes)])
    assert abs(fit.slope + 1 / 3) <= 0.02


def test_repeats_are_averaged_before_fitting():
    points = [(16, 1.0), (16, 3.0), (32, 1.0), (64, 0.5)]
    fit = fit_rate(points)
    assert fit.points[0] == (pytest.approx(np.log(16)), pytest.approx(np.log(2.0)))


def test_degenerate_fits():
    with pytest.raises(DegenerateRateError):
        fit_rate([(16, 1.0), (32, 0.5)])
    with pytest.raises(DegenerateRateError):
        fit_rate([(16, 1.0), (32, 0.0), (64, 0.5)])


def test_rate_fit_rejects_a_single_non_positive_repeat():
    # positive mean at n=32, but one repeat is zero
    points = [(16, 1.0), (32, 0.0), (32, 2.0), (64, 0.5)]
    with pytest.raises(DegenerateRateError, match=r"n=\[32\]"):
        fit_rate(points)
    with pytest.raises(DegenerateRateError):
        fit_rate([(16, 1.0), (32, float("nan")), (64, 0.5)])


def test_per_n_stats():
    stats = per_n_stats([(32, 2.0), (16, 1.0), (16, 3.0)])
    assert [s.n for s in stats] == [16, 32]
    assert stats[0].mean == 2.0
    assert stats[0].stderr == pytest.approx(1.0)
    assert stats[0].count == 2
    assert stats[1].stderr == 0.0
