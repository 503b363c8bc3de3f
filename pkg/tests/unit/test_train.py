import logging

import numpy as np
import pytest

from databricks.labs.cfmlab.core.ensemble import Ensemble, PopulationSpec, Sample
from databricks.labs.cfmlab.core.params import (
    Family,
    LayerParams,
    LossGradient,
    ParameterPath,
    PathNorm,
    ThetaBlockGrad,
    path_norm,
)
from databricks.labs.cfmlab.core.rng import RngHandle
from databricks.labs.cfmlab.errors import ConfigError, OgdIterationError
from databricks.labs.cfmlab.flow import IntegratorConfig
from databricks.labs.cfmlab.train import (
    OgdConfig,
    estimate_gradient_bound,
    ogd_step,
    resolve_ridge,
    run_ogd,
    run_paired_ogd,
    token_stream,
)

FAST = IntegratorConfig("rk4", 2)
POPULATION = PopulationSpec(dimension=2, radius=1.0)


def _scalar_mlp(value: float) -> ParameterPath:
    return ParameterPath([LayerParams(Family.MLP, {"W1": [[value]], "W2": [[value]], "b": [value]})])


def _gradient(value: float) -> LossGradient:
    return LossGradient([ThetaBlockGrad(Family.MLP, {"W1": [[value]], "W2": [[value]], "b": [value]})])


def test_ogd_step_hand_arithmetic():
    theta = ogd_step(_scalar_mlp(2.0), _gradient(1.0), 0.1, 1.0)
    assert np.allclose(theta.flatten(), 1.7)


def test_ogd_step_without_gradient_or_ridge():
    theta = _scalar_mlp(2.0)
    assert np.array_equal(ogd_step(theta, _gradient(0.0), 0.1, 0.0).flatten(), theta.flatten())


def test_ogd_step_rejects_large_ridge():
    with pytest.raises(ConfigError):
        ogd_step(_scalar_mlp(1.0), _gradient(0.0), 0.5, 2.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"eta": 0.0},
        {"eta": 0.1, "ridge": 10.0},
        {"ridge": -1.0},
        {"iterations": -1},
        {"ridge_mode": "adaptive"},
        {"stream_mode": "shuffled"},
        {"target_rule": "mirror"},
        {"cycle_length": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        OgdConfig(**kwargs)


def test_zero_iterations_keep_initialization():
    theta0 = ParameterPath.random([Family.MLP], 2, RngHandle(0), 1.0)
    log = run_ogd(theta0, [], OgdConfig(iterations=0), RngHandle(0))
    assert len(log) == 1
    assert log.records[0].k == 0
    assert log.theta is theta0


def _still_mlp(d: int, seed: int) -> ParameterPath:
    generator = np.random.default_rng(seed)
    layer = LayerParams.random(Family.MLP, d, generator, 1.0)
    return ParameterPath([LayerParams(Family.MLP, {"W1": np.zeros((d, d)), "W2": layer["W2"], "b": layer["b"]})])


def test_ridge_only_decay():
    theta0 = _still_mlp(2, 1)
    x0 = np.array([0.3, -0.4])
    cfg = OgdConfig(eta=0.1, ridge=2.0, iterations=12, integrator=FAST)
    stream = [Sample(x0, Ensemble(np.ones((3, 2))), x0)] * cfg.iterations
    log = run_ogd(theta0, stream, cfg, RngHandle(1))
    expected = (1 - cfg.eta * cfg.ridge) ** np.arange(cfg.iterations + 1) * path_norm(theta0, PathNorm.LINF)
    assert np.allclose(log.theta_norms(), expected, rtol=1e-12)
    assert all(record.grad_linf == 0.0 for record in log.records[1:])


def test_large_ridge_keeps_parameters_bounded():
    theta0 = ParameterPath.zeros([Family.ATTENTION, Family.MLP], 2)
    cfg = OgdConfig(eta=0.1, ridge=5.0, iterations=15, integrator=FAST)
    pairs = token_stream(POPULATION, cfg.iterations, RngHandle(2), cfg)
    log = run_ogd(theta0, [Sample(x, POPULATION, y) for x, y in pairs], cfg, RngHandle(2), context_size=4)
    assert log.theta_norms().max() <= log.max_gradient() / cfg.ridge + 1e-12
    assert [record.k for record in log.records] == list(range(16))


def test_population_context_needs_size():
    cfg = OgdConfig(iterations=1, integrator=FAST)
    with pytest.raises(ConfigError):
        run_ogd(_still_mlp(2, 0), [Sample(np.zeros(2), POPULATION, np.zeros(2))], cfg, RngHandle(0))


def test_short_stream():
    cfg = OgdConfig(iterations=3, integrator=FAST)
    stream = [Sample(np.zeros(2), Ensemble(np.ones((1, 2))), np.zeros(2))]
    with pytest.raises(ConfigError):
        run_ogd(_still_mlp(2, 0), stream, cfg, RngHandle(0))


def test_numerical_failure_names_iteration():
    big = 1e200 * np.eye(2)
    theta0 = ParameterPath([LayerParams(Family.MLP, {"W1": big, "W2": big, "b": np.ones(2)})])
    cfg = OgdConfig(iterations=2, integrator=FAST)
    stream = [Sample(np.ones(2), Ensemble(np.ones((1, 2))), np.zeros(2))] * 2
    with pytest.raises(OgdIterationError) as failure:
        run_ogd(theta0, stream, cfg, RngHandle(0))
    assert failure.value.iteration == 0


def test_token_stream_rules():
    cfg = OgdConfig()
    pairs = token_stream(POPULATION, 5, RngHandle(3), cfg)
    assert len(pairs) == 5
    for x, y in pairs:
        assert np.array_equal(y, np.roll(x, 1))
        assert np.linalg.norm(x) <= 1.0
    independent = token_stream(POPULATION, 5, RngHandle(3), OgdConfig(target_rule="independent"))
    assert not np.array_equal(independent[0][1], np.roll(independent[0][0], 1))


def test_token_stream_cycle():
    pairs = token_stream(POPULATION, 7, RngHandle(4), OgdConfig(stream_mode="cycle", cycle_length=3))
    assert np.array_equal(pairs[0][0], pairs[3][0])
    assert np.array_equal(pairs[2][0], pairs[5][0])
    assert not np.array_equal(pairs[0][0], pairs[1][0])


def test_paired_runs_coincide_on_shared_context():
    theta0 = ParameterPath.random([Family.ATTENTION], 2, RngHandle(5), 0.5)
    cfg = OgdConfig(eta=0.1, iterations=4, integrator=FAST)
    pairs = token_stream(POPULATION, 4, RngHandle(5), cfg)
    log = run_paired_ogd(theta0, POPULATION, pairs, 16, 16, cfg, RngHandle(5), coupled=True)
    assert not log.deviation_series().any()
    assert len(log) == 5


def test_paired_runs_are_reproducible():
    theta0 = ParameterPath.random([Family.ATTENTION], 2, RngHandle(6), 0.5)
    cfg = OgdConfig(eta=0.1, ridge=2.0, iterations=4, integrator=FAST)
    pairs = token_stream(POPULATION, 4, RngHandle(6), cfg)
    first = run_paired_ogd(theta0, POPULATION, pairs, 4, 32, cfg, RngHandle(6))
    second = run_paired_ogd(theta0, POPULATION, pairs, 4, 32, cfg, RngHandle(6))
    assert np.array_equal(first.deviation_series(), second.deviation_series())
    assert first.deviation_series()[0] == 0.0
    assert first.deviation_series()[-1] > 0.0


def test_paired_needs_large_reference():
    cfg = OgdConfig(iterations=1, integrator=FAST)
    with pytest.raises(ConfigError):
        run_paired_ogd(_still_mlp(2, 0), POPULATION, [(np.zeros(2), np.zeros(2))], 8, 32, cfg, RngHandle(0))


def test_paired_needs_enough_tokens():
    cfg = OgdConfig(iterations=3, integrator=FAST)
    with pytest.raises(ConfigError):
        run_paired_ogd(_still_mlp(2, 0), POPULATION, [(np.zeros(2), np.zeros(2))], 1, 8, cfg, RngHandle(0))


def test_gradient_bound_warmup():
    theta0 = ParameterPath.random([Family.ATTENTION], 2, RngHandle(7), 0.5)
    cfg = OgdConfig(eta=0.1, integrator=FAST)
    bound = estimate_gradient_bound(theta0, POPULATION, cfg, RngHandle(7), context_size=4, steps=3)
    assert bound > 0
    assert bound == estimate_gradient_bound(theta0, POPULATION, cfg, RngHandle(7), context_size=4, steps=3)


def test_resolve_ridge(caplog):
    fixed = OgdConfig(ridge=0.5)
    assert resolve_ridge(fixed, 100.0) is fixed
    auto = resolve_ridge(OgdConfig(eta=0.1, ridge_mode="auto"), 1.5)
    assert auto.ridge == pytest.approx(3.0)
    assert auto.ridge_mode == "fixed"
    with caplog.at_level(logging.WARNING, logger="databricks.labs.cfmlab"):
        clipped = resolve_ridge(OgdConfig(eta=0.1, ridge_mode="auto"), 100.0)
    assert clipped.ridge == pytest.approx(9.0)
    assert "clipped" in caplog.text
