"""Backward adjoint system along characteristics and assembly of the loss gradient.

The adjoint state is stacked like the forward state, ``Y = [p; g_1; ...; g_n]``, where ``p``
is the token adjoint and ``g_i`` the gradient of the measure adjoint at particle ``i``.
Backward in depth it solves

    dp/ds   = -D_xV(x)^T p
    dg_i/ds = -D_xV(z_i)^T g_i - ∇_W V[x](z_i)^T p - (1/n) Σ_j ∇_W V[z_j](z_i)^T g_j

and the gradient integrand is ``D_θV(x)^T p + (1/n) Σ_i D_θV(z_i)^T g_i``.

Euler runs the exact discrete adjoint of the forward scheme. RK4 runs the same system with
backward RK4, coefficients taken at the stored step and midpoint stage states, and integrates
the gradient integrand with the same stage weights, as an augmented component of the state.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from databricks.labs.cfmlab.core.ensemble import Ensemble, Sample
from databricks.labs.cfmlab.core.params import (
    LossGradient,
    ParameterPath,
    ThetaBlockGrad,
    path_axpy,
    random_direction,
)
from databricks.labs.cfmlab.core.rng import RngHandle, Stream
from databricks.labs.cfmlab.errors import (
    BoundViolationError,
    ConfigError,
    NonFiniteStateError,
    UnsupportedFamilyError,
)
from databricks.labs.cfmlab.flow import IntegratorConfig, Scheme, Trajectory, integrate_forward
from databricks.labs.cfmlab.framework.backend import CsvBackend
from databricks.labs.cfmlab.velocity import Linearization, linearize

logger = logging.getLogger(__name__)

__all__ = [
    "AdjointTrajectory",
    "FdReport",
    "LossGradient",
    "assemble_gradient",
    "backward_integrate",
    "gradient_fd_check",
    "loss_and_gradient",
    "loss_eval",
    "terminal_conditions",
    "write_adjoint",
]

# |a - f| / max(|a|, |f|, floor)
RELATIVE_ERROR_FLOOR = 1e-6
ENVELOPE_SLACK = 1e-12
MIDPOINT_STAGE = 2
RK4_WEIGHTS = (1.0, 2.0, 2.0, 1.0)


def loss_eval(x1: np.ndarray, y0: np.ndarray) -> float:
    residual = np.asarray(x1, dtype=np.float64) - np.asarray(y0, dtype=np.float64)
    return 0.5 * float(residual @ residual)


def terminal_conditions(x1: np.ndarray, y0: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    p1 = np.asarray(x1, dtype=np.float64) - np.asarray(y0, dtype=np.float64)
    return p1, np.zeros((n, p1.shape[0]))


def _measure_scale(n: int) -> np.ndarray:
    scale = np.ones(n + 1)
    scale[0] = n
    return scale


def _theta_scale(n: int) -> np.ndarray:
    scale = np.full(n + 1, 1.0 / n)
    scale[0] = 1.0
    return scale


class _Coefficients:
    """Backward right-hand side and gradient integrand at one stacked state."""

    def __init__(self, lin: Linearization, n: int):
        self._lin = lin
        self._n = n

    @classmethod
    def at(cls, theta: ParameterPath, layer: int, P: np.ndarray) -> "_Coefficients":
        return cls(linearize(theta.layers[layer], P, P[1:]), P.shape[0] - 1)

    def apply(self, Y: np.ndarray) -> np.ndarray:
        """``F(Y)`` with ``dY/ds = -F(Y)``."""
        out = self._lin.jac_x_t_apply(Y)
        out[1:] += self._lin.measure_pullback(Y, _measure_scale(self._n))
        return out

    def integrand(self, Y: np.ndarray) -> ThetaBlockGrad:
        return self._lin.theta_pullback(Y, _theta_scale(self._n))

    def token_lipschitz(self) -> float:
        return float(np.linalg.norm(self._lin.jac_x_matrices()[0], 2))


class AdjointTrajectory:
    def __init__(
        self, states: np.ndarray, envelope: np.ndarray, gradient: LossGradient, stages: np.ndarray | None = None
    ):
        self._states = states
        self._stages = stages
        self._envelope = envelope
        self._gradient = gradient

    @property
    def states(self) -> np.ndarray:
        return self._states

    @property
    def stages(self) -> np.ndarray | None:
        """Backward RK4 stage arguments ``[Y, Y + h/2 k1, Y + h/2 k2, Y + h k3]`` per step, shape ``(T, 4, n+1, d)``."""
        return self._stages

    @property
    def p_states(self) -> np.ndarray:
        return self._states[:, 0, :]

    @property
    def g_states(self) -> np.ndarray:
        return self._states[:, 1:, :]

    @property
    def steps(self) -> int:
        return self._states.shape[0] - 1

    @property
    def n(self) -> int:
        return self._states.shape[1] - 1

    @property
    def envelope(self) -> np.ndarray:
        """``exp(Σ_{τ >= t} h L_τ) |p_1|``, the Grönwall bound on ``|p_t|``."""
        return self._envelope

    @property
    def gradient(self) -> LossGradient:
        """Gradient accumulated during the backward sweep."""
        return self._gradient

    def __repr__(self):
        return f"AdjointTrajectory<T={self.steps}, n={self.n}, |p0|={np.linalg.norm(self.p_states[0]):.6g}>"


class _BlockSums:
    def __init__(self, theta: ParameterPath):
        self._sums = [None] * theta.L
        self._schedule = theta

    def add(self, layer: int, block: ThetaBlockGrad, weight: float):
        current = self._sums[layer]
        self._sums[layer] = block.axpby(0.0, block, weight) if current is None else current.axpby(weight, block, 1.0)

    def gradient(self) -> LossGradient:
        zeros = LossGradient.zeros_like(self._schedule)
        return LossGradient([s if s is not None else z for s, z in zip(self._sums, zeros.blocks, strict=True)])


def _check_differentiable(theta: ParameterPath):
    if not theta.differentiable():
        schedule = ",".join(f.value for f in theta.schedule)
        msg = f"the adjoint needs a differentiable schedule, got {schedule}"
        raise UnsupportedFamilyError(msg)


def _check_grid(traj: Trajectory, theta: ParameterPath):
    if traj.layers != theta.L or traj.dimension != theta.dimension:
        msg = f"trajectory {traj!r} does not match path {theta!r}"
        raise ConfigError(msg)


def backward_integrate(
    traj: Trajectory, theta: ParameterPath, y0: np.ndarray, cfg: IntegratorConfig | None = None
) -> AdjointTrajectory:
    """Solves the adjoint system from ``s = 1`` to ``s = 0`` on the grid of ``traj``.

    ``cfg`` defaults to the integrator that produced ``traj`` and must match it.
    """
    _check_differentiable(theta)
    _check_grid(traj, theta)
    if cfg is not None and (cfg.integration_scheme, cfg.substeps_per_layer) != (
        traj.scheme,
        traj.cfg.substeps_per_layer,
    ):
        msg = f"integrator {cfg} does not match the forward trajectory {traj!r}"
        raise ConfigError(msg)
    m = traj.cfg.substeps_per_layer
    h = traj.h
    states = np.empty_like(traj.states)
    p1, g1 = terminal_conditions(traj.x_states[-1], y0, traj.n)
    states[-1, 0] = p1
    states[-1, 1:] = g1
    exponents = np.zeros(traj.steps + 1)
    sums = _BlockSums(theta)
    stages = np.empty((traj.steps, 4, *states.shape[1:])) if traj.scheme is Scheme.RK4 else None
    for t in reversed(range(traj.steps)):
        layer = int(traj.layer_index[t])
        Y = states[t + 1]
        if stages is None:
            start = _Coefficients.at(theta, layer, traj.states[t])
            states[t] = Y + h * start.apply(Y)
            lipschitz = start.token_lipschitz()
            sums.add(layer, start.integrand(Y), 1.0 / m)
        else:
            coefficients = _rk4_coefficients(traj, theta, layer, t)
            end, middle, _, start = coefficients
            k1 = end.apply(Y)
            k2 = middle.apply(Y + 0.5 * h * k1)
            k3 = middle.apply(Y + 0.5 * h * k2)
            stages[t] = np.stack([Y, Y + 0.5 * h * k1, Y + 0.5 * h * k2, Y + h * k3])
            k4 = start.apply(stages[t, 3])
            states[t] = Y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            lipschitz = max(end.token_lipschitz(), middle.token_lipschitz(), start.token_lipschitz())
            for weight, coefficient, stage in zip(RK4_WEIGHTS, coefficients, stages[t], strict=True):
                sums.add(layer, coefficient.integrand(stage), weight / (6.0 * m))
        if not np.all(np.isfinite(states[t])):
            raise NonFiniteStateError("adjoint", t, layer)
        exponents[t] = exponents[t + 1] + h * lipschitz
    envelope = np.exp(exponents) * float(np.linalg.norm(p1))
    _check_envelope(states[:, 0, :], envelope)
    return AdjointTrajectory(states, envelope, sums.gradient(), stages)


def _rk4_coefficients(traj: Trajectory, theta: ParameterPath, layer: int, t: int) -> list[_Coefficients]:
    """Coefficients for the four backward stages: step end, midpoint twice, step start."""
    middle = _Coefficients.at(theta, layer, traj.stages[t, MIDPOINT_STAGE])
    return [
        _Coefficients.at(theta, layer, traj.states[t + 1]),
        middle,
        middle,
        _Coefficients.at(theta, layer, traj.states[t]),
    ]


def _check_envelope(p_states: np.ndarray, envelope: np.ndarray):
    norms = np.linalg.norm(p_states, axis=1)
    excess = norms - envelope * (1.0 + ENVELOPE_SLACK)
    worst = int(np.argmax(excess))
    if excess[worst] > 0:
        logger.error(f"token adjoint leaves its Grönwall envelope at step {worst}")
        raise BoundViolationError("adjoint envelope", float(norms[worst]), float(envelope[worst]), f"step {worst}")


def assemble_gradient(traj: Trajectory, adj: AdjointTrajectory, theta: ParameterPath) -> LossGradient:
    """Layer averages of the gradient integrand, recomputed from stored forward and adjoint states."""
    _check_differentiable(theta)
    _check_grid(traj, theta)
    if adj.steps != traj.steps or adj.n != traj.n:
        msg = f"adjoint grid {adj!r} does not match {traj!r}"
        raise ConfigError(msg)
    m = traj.cfg.substeps_per_layer
    if traj.scheme is Scheme.RK4 and adj.stages is None:
        msg = f"{adj!r} carries no backward stages for the rk4 quadrature"
        raise ConfigError(msg)
    sums = _BlockSums(theta)
    for t in range(traj.steps):
        layer = int(traj.layer_index[t])
        if adj.stages is None:
            start = _Coefficients.at(theta, layer, traj.states[t])
            sums.add(layer, start.integrand(adj.states[t + 1]), 1.0 / m)
            continue
        coefficients = _rk4_coefficients(traj, theta, layer, t)
        for weight, coefficient, stage in zip(RK4_WEIGHTS, coefficients, adj.stages[t], strict=True):
            sums.add(layer, coefficient.integrand(stage), weight / (6.0 * m))
    return sums.gradient()


@dataclass
class LossEvaluation:
    loss: float
    trajectory: Trajectory
    adjoint: AdjointTrajectory

    @property
    def gradient(self) -> LossGradient:
        return self.adjoint.gradient


def loss_and_gradient(
    x0: np.ndarray, mu0: Ensemble, y0: np.ndarray, theta: ParameterPath, cfg: IntegratorConfig
) -> LossEvaluation:
    traj = integrate_forward(x0, mu0, theta, cfg)
    adj = backward_integrate(traj, theta, y0)
    return LossEvaluation(loss_eval(traj.x_states[-1], y0), traj, adj)


def sample_loss(x0: np.ndarray, mu0: Ensemble, y0: np.ndarray, theta: ParameterPath, cfg: IntegratorConfig) -> float:
    return loss_eval(integrate_forward(x0, mu0, theta, cfg).x_states[-1], y0)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), RELATIVE_ERROR_FLOOR)


@dataclass
class FdDirection:
    index: int
    analytic: float
    finite_difference: float
    rel_error: float
    analytic_fine: float
    finite_difference_fine: float
    rel_error_fine: float


@dataclass
class FdReport:
    substeps: int
    per_direction: list[FdDirection] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(d.rel_error for d in self.per_direction)

    @property
    def max_rel_error_fine(self) -> float:
        """Worst error at twice the substeps."""
        return max(d.rel_error_fine for d in self.per_direction)

    @property
    def observed_order(self) -> float:
        coarse, fine = self.max_rel_error, self.max_rel_error_fine
        if coarse <= 0 or fine <= 0:
            return math.nan
        return math.log2(coarse / fine)


def _directional_check(
    x0: np.ndarray,
    mu0: Ensemble,
    y0: np.ndarray,
    theta: ParameterPath,
    cfg: IntegratorConfig,
    directions: list[ParameterPath],
    epsilon: float,
) -> list[tuple[float, float, float]]:
    gradient = loss_and_gradient(x0, mu0, y0, theta, cfg).gradient
    results = []
    for eta in directions:
        analytic = gradient.pair(eta)
        plus = sample_loss(x0, mu0, y0, path_axpy(epsilon, eta, 1.0, theta), cfg)
        minus = sample_loss(x0, mu0, y0, path_axpy(-epsilon, eta, 1.0, theta), cfg)
        numeric = (plus - minus) / (2.0 * epsilon)
        results.append((analytic, numeric, relative_error(analytic, numeric)))
    return results


def gradient_fd_check(
    sample: Sample,
    theta: ParameterPath,
    cfg: IntegratorConfig,
    directions: int,
    rng: RngHandle,
    *,
    context_size: int | None = None,
    epsilon: float = 1e-4,
) -> FdReport:
    """Compares adjoint directional derivatives with central differences of the loss.

    Directions are Gaussian paths of unit L² norm. The comparison runs at ``m`` and ``2m``
    substeps per layer so the report exposes the convergence order.
    """
    if directions < 1:
        msg = f"directions must be >= 1, got {directions}"
        raise ConfigError(msg)
    if not isinstance(sample.context, Ensemble) and context_size is None:
        msg = "a population context needs context_size"
        raise ConfigError(msg)
    mu0 = sample.materialize(context_size or 0, rng.child(Stream.CONTEXT))
    etas = [random_direction(theta, rng.child(Stream.DIRECTIONS, j)) for j in range(directions)]
    coarse = _directional_check(sample.x0, mu0, sample.y0, theta, cfg, etas, epsilon)
    fine_cfg = cfg.with_substeps(2 * cfg.substeps_per_layer)
    fine = _directional_check(sample.x0, mu0, sample.y0, theta, fine_cfg, etas, epsilon)
    report = FdReport(cfg.substeps_per_layer)
    for j, ((a, f, e), (a2, f2, e2)) in enumerate(zip(coarse, fine, strict=True)):
        report.per_direction.append(FdDirection(j, a, f, e, a2, f2, e2))
    logger.debug(
        f"fd check m={cfg.substeps_per_layer}: max rel error {report.max_rel_error:.3g}, "
        f"at 2m {report.max_rel_error_fine:.3g}"
    )
    return report


@dataclass
class AdjointRow:
    step: int
    s: float
    kind: str
    particle_index: int
    coord: list[float]


def write_adjoint(traj: Trajectory, adj: AdjointTrajectory, backend: CsvBackend, name: str = "adjoint.csv") -> Path:
    rows = []
    for step, s in enumerate(traj.grid):
        rows.append(AdjointRow(step, float(s), "p", -1, adj.p_states[step].tolist()))
        for i, g in enumerate(adj.g_states[step]):
            rows.append(AdjointRow(step, float(s), "g", i, g.tolist()))
    backend.save_table(name, rows, AdjointRow)
    return backend.path(name)
