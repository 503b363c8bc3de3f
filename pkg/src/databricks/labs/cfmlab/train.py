"""Online gradient descent with a ridge penalty, single and paired population/empirical runs."""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from databricks.labs.cfmlab.adjoint import loss_and_gradient
from databricks.labs.cfmlab.core.ensemble import Ensemble, PopulationSpec, Sample, sample_ensemble, uniform_ball
from databricks.labs.cfmlab.core.params import (
    LossGradient,
    ParameterPath,
    PathNorm,
    path_axpy,
    path_distance,
    path_norm,
)
from databricks.labs.cfmlab.core.rng import RngHandle, Stream
from databricks.labs.cfmlab.errors import BoundViolationError, ConfigError, NumericalError, OgdIterationError
from databricks.labs.cfmlab.flow import IntegratorConfig

logger = logging.getLogger(__name__)

__all__ = [
    "OgdConfig",
    "PairedRecord",
    "TrainLog",
    "TrainRecord",
    "estimate_gradient_bound",
    "ogd_step",
    "resolve_ridge",
    "run_ogd",
    "run_paired_ogd",
    "token_stream",
]

WARMUP_STEPS = 20
ENVELOPE_SLACK = 1e-9


class RidgeMode(str, Enum):
    FIXED = "fixed"
    AUTO = "auto"


class StreamMode(str, Enum):
    IID = "iid"
    CYCLE = "cycle"


class TargetRule(str, Enum):
    ROLL = "roll"
    INDEPENDENT = "independent"


@dataclass
class OgdConfig:
    eta: float = 0.05
    # λ; ignored when ridge_mode is auto
    ridge: float = 0.0
    iterations: int = 100
    ridge_mode: str = RidgeMode.FIXED.value
    stream_mode: str = StreamMode.IID.value
    cycle_length: int = 16
    target_rule: str = TargetRule.ROLL.value
    integrator: IntegratorConfig | None = None

    def __post_init__(self):
        for name, enum in (("ridge_mode", RidgeMode), ("stream_mode", StreamMode), ("target_rule", TargetRule)):
            try:
                enum(getattr(self, name))
            except ValueError:
                valid = ", ".join(v.value for v in enum)
                msg = f"ogd.{name}: expected one of {valid}, got {getattr(self, name)!r}"
                raise ConfigError(msg) from None
        if self.eta <= 0:
            msg = f"ogd.eta must be positive, got {self.eta}"
            raise ConfigError(msg)
        if self.ridge < 0 or self.eta * self.ridge >= 1:
            msg = f"ogd.ridge must lie in [0, 1/eta), got {self.ridge} with eta={self.eta}"
            raise ConfigError(msg)
        if self.iterations < 0:
            msg = f"ogd.iterations must be non-negative, got {self.iterations}"
            raise ConfigError(msg)
        if self.cycle_length < 1:
            msg = f"ogd.cycle_length must be >= 1, got {self.cycle_length}"
            raise ConfigError(msg)

    @property
    def integration(self) -> IntegratorConfig:
        return self.integrator or IntegratorConfig()

    def with_ridge(self, ridge: float) -> "OgdConfig":
        return OgdConfig(
            eta=self.eta,
            ridge=ridge,
            iterations=self.iterations,
            ridge_mode=RidgeMode.FIXED.value,
            stream_mode=self.stream_mode,
            cycle_length=self.cycle_length,
            target_rule=self.target_rule,
            integrator=self.integrator,
        )


@dataclass
class TrainRecord:
    k: int
    loss: float
    theta_linf: float
    grad_linf: float


@dataclass
class PairedRecord:
    k: int
    loss_pop: float
    loss_emp: float
    theta_linf: float
    grad_linf: float
    deviation_linf: float
    grad_gap_linf: float


@dataclass
class TrainLog:
    """Per-iteration records including ``k = 0``; losses and gradients of row ``k`` belong to step ``k - 1``."""

    records: list[TrainRecord] = field(default_factory=list)
    paired: list[PairedRecord] = field(default_factory=list)
    theta: ParameterPath | None = None
    theta_emp: ParameterPath | None = None

    def __len__(self):
        return len(self.paired) if self.paired else len(self.records)

    def deviation_series(self) -> np.ndarray:
        return np.array([r.deviation_linf for r in self.paired])

    def theta_norms(self) -> np.ndarray:
        if self.paired:
            return np.array([r.theta_linf for r in self.paired])
        return np.array([r.theta_linf for r in self.records])

    def max_gradient(self) -> float:
        grads = [r.grad_linf for r in self.records] + [r.grad_linf for r in self.paired]
        finite = [g for g in grads if not math.isnan(g)]
        return max(finite, default=0.0)


def ogd_step(theta: ParameterPath, grad: LossGradient, eta: float, ridge: float) -> ParameterPath:
    """``(1 - ηλ) θ - η grad``."""
    if eta * ridge >= 1:
        msg = f"eta * lambda must be < 1, got {eta * ridge}"
        raise ConfigError(msg)
    return path_axpy(-eta, grad, 1.0 - eta * ridge, theta)


def token_stream(
    population: PopulationSpec, iterations: int, rng: RngHandle, cfg: OgdConfig
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Token/target pairs in the population ball.

    ``roll`` targets rotate the token coordinates by one; ``independent`` targets are drawn
    separately. In ``cycle`` mode the stream repeats ``cycle_length`` distinct pairs.
    """
    distinct = iterations if StreamMode(cfg.stream_mode) is StreamMode.IID else min(iterations, cfg.cycle_length)
    generator = rng.generator()
    tokens = uniform_ball(generator, distinct, population.dimension, population.radius)
    if TargetRule(cfg.target_rule) is TargetRule.ROLL:
        targets = np.roll(tokens, 1, axis=1)
    else:
        targets = uniform_ball(generator, distinct, population.dimension, population.radius)
    return [(tokens[k % distinct], targets[k % distinct]) for k in range(iterations)]


def _check_ridge_envelope(k: int, theta_norm: float, theta0_norm: float, grad_bound: float, ridge: float):
    if ridge <= 0:
        return
    limit = theta0_norm + grad_bound / ridge
    if theta_norm > limit * (1.0 + ENVELOPE_SLACK):
        raise BoundViolationError("ogd ridge envelope", theta_norm, limit, f"iteration {k}")


def run_ogd(
    theta0: ParameterPath,
    stream: Iterable[Sample],
    cfg: OgdConfig,
    rng: RngHandle,
    *,
    context_size: int | None = None,
) -> TrainLog:
    """Runs ``cfg.iterations`` OGD steps, one sample per step.

    Population contexts are materialized with ``context_size`` particles on the stream
    ``rng / CONTEXT / k``.
    """
    theta = theta0
    theta0_norm = path_norm(theta0, PathNorm.LINF)
    log = TrainLog(records=[TrainRecord(0, math.nan, theta0_norm, math.nan)])
    grad_bound = 0.0
    samples = iter(stream)
    for k in range(cfg.iterations):
        try:
            sample = next(samples)
        except StopIteration:
            msg = f"sample stream ended after {k} of {cfg.iterations} iterations"
            raise ConfigError(msg) from None
        if not isinstance(sample.context, Ensemble) and context_size is None:
            msg = "a population context needs context_size"
            raise ConfigError(msg)
        try:
            mu0 = sample.materialize(context_size or 0, rng.child(Stream.CONTEXT, k))
            evaluation = loss_and_gradient(sample.x0, mu0, sample.y0, theta, cfg.integration)
        except NumericalError as err:
            raise OgdIterationError(k, err) from err
        grad = evaluation.gradient
        theta = ogd_step(theta, grad, cfg.eta, cfg.ridge)
        grad_norm = path_norm(grad, PathNorm.LINF)
        grad_bound = max(grad_bound, grad_norm)
        theta_norm = path_norm(theta, PathNorm.LINF)
        _check_ridge_envelope(k + 1, theta_norm, theta0_norm, grad_bound, cfg.ridge)
        log.records.append(TrainRecord(k + 1, evaluation.loss, theta_norm, grad_norm))
        logger.debug(f"ogd k={k + 1}: loss={evaluation.loss:.6g} |θ|∞={theta_norm:.6g} |g|∞={grad_norm:.6g}")
    log.theta = theta
    return log


def run_paired_ogd(
    theta0: ParameterPath,
    population: PopulationSpec,
    x0y0_stream: Sequence[tuple[np.ndarray, np.ndarray]],
    n: int,
    n_ref: int,
    cfg: OgdConfig,
    rng: RngHandle,
    *,
    coupled: bool = False,
) -> TrainLog:
    """Population trainer on fresh ``n_ref``-particle contexts against an empirical trainer on fresh
    ``n``-particle contexts, both starting from ``theta0`` and sharing tokens and targets.

    With ``coupled`` the empirical context is the first ``n`` particles of the population one.
    """
    if not coupled and n_ref < 8 * n:
        msg = f"n_ref must be >= 8 n, got n_ref={n_ref} for n={n}"
        raise ConfigError(msg)
    if len(x0y0_stream) < cfg.iterations:
        msg = f"token stream has {len(x0y0_stream)} pairs, need {cfg.iterations}"
        raise ConfigError(msg)
    theta, theta_emp = theta0, theta0
    theta0_norm = path_norm(theta0, PathNorm.LINF)
    log = TrainLog(paired=[PairedRecord(0, math.nan, math.nan, theta0_norm, math.nan, 0.0, math.nan)])
    grad_bound = 0.0
    deviation = 0.0
    for k in range(cfg.iterations):
        x0, y0 = x0y0_stream[k]
        try:
            reference = sample_ensemble(population, n_ref, rng.child(Stream.POPULATION_CONTEXT, k))
            if coupled:
                empirical = reference.head(n)
            else:
                empirical = sample_ensemble(population, n, rng.child(Stream.EMPIRICAL_CONTEXT, k))
            pop = loss_and_gradient(x0, reference, y0, theta, cfg.integration)
            emp = loss_and_gradient(x0, empirical, y0, theta_emp, cfg.integration)
        except NumericalError as err:
            raise OgdIterationError(k, err) from err
        gap = path_distance(pop.gradient, emp.gradient)
        theta = ogd_step(theta, pop.gradient, cfg.eta, cfg.ridge)
        theta_emp = ogd_step(theta_emp, emp.gradient, cfg.eta, cfg.ridge)
        next_deviation = path_distance(theta, theta_emp)
        limit = deviation + cfg.eta * gap
        if next_deviation > limit * (1.0 + ENVELOPE_SLACK) + 1e-15:
            raise BoundViolationError("paired one-step envelope", next_deviation, limit, f"iteration {k + 1}")
        deviation = next_deviation
        grad_norm = path_norm(pop.gradient, PathNorm.LINF)
        grad_bound = max(grad_bound, grad_norm, path_norm(emp.gradient, PathNorm.LINF))
        theta_norm = path_norm(theta, PathNorm.LINF)
        _check_ridge_envelope(k + 1, theta_norm, theta0_norm, grad_bound, cfg.ridge)
        _check_ridge_envelope(k + 1, path_norm(theta_emp, PathNorm.LINF), theta0_norm, grad_bound, cfg.ridge)
        log.paired.append(PairedRecord(k + 1, pop.loss, emp.loss, theta_norm, grad_norm, deviation, gap))
    log.theta, log.theta_emp = theta, theta_emp
    logger.debug(f"paired ogd n={n} n_ref={n_ref}: final deviation {deviation:.6g}")
    return log


def estimate_gradient_bound(
    theta0: ParameterPath,
    population: PopulationSpec,
    cfg: OgdConfig,
    rng: RngHandle,
    context_size: int,
    steps: int = WARMUP_STEPS,
) -> float:
    """Largest gradient L∞ norm seen over a short unregularized warm-up run."""
    warmup_cfg = OgdConfig(
        eta=cfg.eta,
        ridge=0.0,
        iterations=steps,
        stream_mode=cfg.stream_mode,
        cycle_length=cfg.cycle_length,
        target_rule=cfg.target_rule,
        integrator=cfg.integrator,
    )
    warmup = rng.child(Stream.WARMUP)
    pairs = token_stream(population, steps, warmup.child(Stream.TOKEN), warmup_cfg)
    stream = [Sample(x0, population, y0) for x0, y0 in pairs]
    log = run_ogd(theta0, stream, warmup_cfg, warmup, context_size=context_size)
    bound = log.max_gradient()
    logger.info(f"gradient bound from {steps} warm-up steps: {bound:.6g}")
    return bound


def resolve_ridge(cfg: OgdConfig, gradient_bound: float) -> OgdConfig:
    """Fixes λ for ``auto`` mode as ``min(2 Ĝ, 0.9 / η)``."""
    if RidgeMode(cfg.ridge_mode) is RidgeMode.FIXED:
        return cfg
    ridge = 2.0 * gradient_bound
    ceiling = 0.9 / cfg.eta
    if ridge > ceiling:
        logger.warning(f"ridge 2Ĝ={ridge:.6g} clipped to 0.9/eta={ceiling:.6g}")
        ridge = ceiling
    return cfg.with_ridge(ridge)
