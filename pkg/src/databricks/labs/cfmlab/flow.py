"""Forward integration of the coupled token/context system over depth ``s ∈ [0, 1]``.

The token and all context particles are stacked into one state ``P = [x; z_1; ...; z_n]``
and advanced together under the shared field, so the context measure is transported as the
pushforward along particle characteristics.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from databricks.labs.cfmlab.core.ensemble import Ensemble
from databricks.labs.cfmlab.core.params import LayerParams, ParameterPath
from databricks.labs.cfmlab.errors import BoundViolationError, ConfigError, NonFiniteStateError
from databricks.labs.cfmlab.framework.backend import CsvBackend
from databricks.labs.cfmlab.metrics import w1_exact
from databricks.labs.cfmlab.velocity import linearize, velocity_field

logger = logging.getLogger(__name__)

__all__ = [
    "IntegratorConfig",
    "Scheme",
    "StabilityEnvelope",
    "Trajectory",
    "check_stability_envelope",
    "integrate_forward",
    "measured_lipschitz",
    "output_token",
    "write_trajectory",
]

# relative slack on the flow stability envelope
ENVELOPE_SLACK = 1e-9


class Scheme(str, Enum):
    EULER = "euler"
    RK4 = "rk4"

    @property
    def stages(self) -> int:
        return 4 if self is Scheme.RK4 else 1


@dataclass
class IntegratorConfig:
    scheme: str = Scheme.RK4.value
    substeps_per_layer: int = 8

    def __post_init__(self):
        try:
            Scheme(self.scheme)
        except ValueError:
            msg = f"integrator.scheme: expected euler or rk4, got {self.scheme!r}"
            raise ConfigError(msg) from None
        if self.substeps_per_layer < 1:
            msg = f"integrator.substeps_per_layer must be >= 1, got {self.substeps_per_layer}"
            raise ConfigError(msg)

    @property
    def integration_scheme(self) -> Scheme:
        return Scheme(self.scheme)

    def step_size(self, layers: int) -> float:
        return 1.0 / (layers * self.substeps_per_layer)

    def with_substeps(self, m: int) -> "IntegratorConfig":
        return IntegratorConfig(self.scheme, m)


class Trajectory:
    """Dense record of a forward solve.

    ``states[t]`` is the stacked state at ``grid[t]``; ``stages[t, k]`` is the state at which
    stage ``k`` of step ``t`` evaluated the field (one stage for Euler, four for RK4).
    """

    def __init__(
        self,
        cfg: IntegratorConfig,
        layers: int,
        states: np.ndarray,
        stages: np.ndarray,
    ):
        self._cfg = cfg
        self._layers = layers
        self._states = states
        self._stages = stages
        steps = states.shape[0] - 1
        self._grid = np.arange(steps + 1) / steps
        self._layer_index = np.arange(steps) // cfg.substeps_per_layer

    @property
    def cfg(self) -> IntegratorConfig:
        return self._cfg

    @property
    def scheme(self) -> Scheme:
        return self._cfg.integration_scheme

    @property
    def layers(self) -> int:
        return self._layers

    @property
    def steps(self) -> int:
        return self._states.shape[0] - 1

    @property
    def h(self) -> float:
        return self._cfg.step_size(self._layers)

    @property
    def n(self) -> int:
        return self._states.shape[1] - 1

    @property
    def dimension(self) -> int:
        return self._states.shape[2]

    @property
    def grid(self) -> np.ndarray:
        return self._grid

    @property
    def layer_index(self) -> np.ndarray:
        return self._layer_index

    @property
    def states(self) -> np.ndarray:
        return self._states

    @property
    def stages(self) -> np.ndarray:
        return self._stages

    @property
    def x_states(self) -> np.ndarray:
        return self._states[:, 0, :]

    @property
    def particle_states(self) -> np.ndarray:
        return self._states[:, 1:, :]

    def context_at(self, step: int) -> Ensemble:
        return Ensemble(self._states[step, 1:, :])

    def layer_boundaries(self) -> np.ndarray:
        """Grid indices at ``s = l / L`` for ``l = 0..L``."""
        return np.arange(self._layers + 1) * self._cfg.substeps_per_layer

    def max_particle_norms(self) -> np.ndarray:
        return np.linalg.norm(self.particle_states, axis=2).max(axis=1)

    def __repr__(self):
        return f"Trajectory<{self.scheme.value}, T={self.steps}, n={self.n}, d={self.dimension}>"


def _check_finite(P: np.ndarray, step: int, layer: int):
    if not np.all(np.isfinite(P)):
        raise NonFiniteStateError("forward", step, layer)


def _euler(layer: LayerParams, P: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    return P + h * velocity_field(layer, P), P[None]


def _rk4(layer: LayerParams, P: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    k1 = velocity_field(layer, P)
    s2 = P + 0.5 * h * k1
    k2 = velocity_field(layer, s2)
    s3 = P + 0.5 * h * k2
    k3 = velocity_field(layer, s3)
    s4 = P + h * k3
    k4 = velocity_field(layer, s4)
    return P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), np.stack([P, s2, s3, s4])


_STEPPERS = {Scheme.EULER: _euler, Scheme.RK4: _rk4}


def integrate_forward(x0: np.ndarray, mu0: Ensemble, theta: ParameterPath, cfg: IntegratorConfig) -> Trajectory:
    x = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x.shape[0] != theta.dimension or mu0.dimension != theta.dimension:
        msg = f"dimension mismatch: path d={theta.dimension}, x0 d={x.shape[0]}, context d={mu0.dimension}"
        raise ConfigError(msg)
    scheme = cfg.integration_scheme
    m = cfg.substeps_per_layer
    steps = theta.L * m
    h = cfg.step_size(theta.L)
    states = np.empty((steps + 1, mu0.n + 1, theta.dimension))
    stages = np.empty((steps, scheme.stages, mu0.n + 1, theta.dimension))
    states[0, 0] = x
    states[0, 1:] = mu0.particles
    stepper = _STEPPERS[scheme]
    for t in range(steps):
        layer_index = t // m
        states[t + 1], stages[t] = stepper(theta.layers[layer_index], states[t], h)
        _check_finite(states[t + 1], t + 1, layer_index)
    logger.debug(f"forward {scheme.value}: T={steps}, n={mu0.n}, |x1|={np.linalg.norm(states[-1, 0]):.6g}")
    return Trajectory(cfg, theta.L, states, stages)


def output_token(traj: Trajectory) -> np.ndarray:
    return traj.x_states[-1].copy()


def measured_lipschitz(traj: Trajectory, theta: ParameterPath) -> float:
    """Largest spatial or Wasserstein Jacobian norm of the field over every grid state of ``traj``.

    A state on a layer boundary is measured under both adjacent layers.
    """
    m = traj.cfg.substeps_per_layer
    best = 0.0
    for t in range(traj.steps + 1):
        P = traj.states[t]
        active = {min(t // m, theta.L - 1), max(t - 1, 0) // m}
        for index in active:
            lin = linearize(theta.layers[index], P, P[1:])
            spatial = float(np.linalg.norm(lin.jac_x_matrices(), ord=2, axis=(-2, -1)).max())
            best = max(best, spatial, float(lin.wasserstein_jac_norms().max()))
    return best


@dataclass(frozen=True)
class StabilityEnvelope:
    """``sup_s |x_s - x̃_s|`` against ``e^{3L̂} (W1(μ_0, μ̃_0) + |x_0 - x̃_0|)`` for two solves on one path."""

    deviation: float
    input_distance: float
    lipschitz: float

    @property
    def limit(self) -> float:
        if self.input_distance == 0:
            return 0.0
        return float(np.exp(3.0 * self.lipschitz)) * self.input_distance

    @property
    def ratio(self) -> float:
        if self.limit > 0:
            return self.deviation / self.limit
        return 0.0 if self.deviation == 0 else float("inf")

    def check(self) -> "StabilityEnvelope":
        if self.deviation > self.limit * (1.0 + ENVELOPE_SLACK):
            witness = f"L={self.lipschitz:.6g}, input distance {self.input_distance:.6g}"
            raise BoundViolationError("flow stability envelope", self.deviation, self.limit, witness)
        return self


def check_stability_envelope(a: Trajectory, b: Trajectory, theta: ParameterPath) -> StabilityEnvelope:
    """Measures both solves of ``theta`` and raises :class:`BoundViolationError` outside the envelope."""
    if a.steps != b.steps or a.layers != theta.L or b.layers != theta.L:
        msg = f"envelope needs two solves of the same path: {a!r}, {b!r}, L={theta.L}"
        raise ConfigError(msg)
    w1_initial, _ = w1_exact(a.context_at(0), b.context_at(0))
    envelope = StabilityEnvelope(
        deviation=float(np.max(np.linalg.norm(a.x_states - b.x_states, axis=1))),
        input_distance=w1_initial + float(np.linalg.norm(a.x_states[0] - b.x_states[0])),
        lipschitz=max(measured_lipschitz(a, theta), measured_lipschitz(b, theta)),
    )
    logger.debug(f"stability envelope: deviation {envelope.deviation:.6g}, limit {envelope.limit:.6g}")
    return envelope.check()


@dataclass
class TrajectoryRow:
    step: int
    s: float
    kind: str
    particle_index: int
    coord: list[float]


def trajectory_rows(traj: Trajectory) -> list[TrajectoryRow]:
    rows = []
    for step, s in enumerate(traj.grid):
        rows.append(TrajectoryRow(step, float(s), "token", -1, traj.x_states[step].tolist()))
        for i, z in enumerate(traj.particle_states[step]):
            rows.append(TrajectoryRow(step, float(s), "particle", i, z.tolist()))
    return rows


def write_trajectory(traj: Trajectory, backend: CsvBackend, name: str = "trajectory.csv") -> Path:
    backend.save_table(name, trajectory_rows(traj), TrajectoryRow)
    return backend.path(name)
