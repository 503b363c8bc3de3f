import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from databricks.labs.cfmlab.core.rng import RngHandle
from databricks.labs.cfmlab.errors import ConfigError, SamplingError

logger = logging.getLogger(__name__)

__all__ = ["Ensemble", "PopulationKind", "PopulationSpec", "Sample", "sample_ensemble", "uniform_ball"]

MAX_REJECTIONS = 1_000_000


class Ensemble:
    """Equal-weight empirical measure ``(1/n) Σ δ_{z_i}`` over ``n`` particles in R^d."""

    def __init__(self, particles: np.ndarray):
        array = np.array(particles, dtype=np.float64)
        if array.ndim == 1:
            array = array.reshape(-1, 1)
        if array.ndim != 2 or array.shape[0] == 0:
            msg = f"an ensemble needs a non-empty (n, d) array, got shape {array.shape}"
            raise ValueError(msg)
        if not np.all(np.isfinite(array)):
            msg = "ensemble particles must be finite"
            raise ValueError(msg)
        array.setflags(write=False)
        self._particles = array

    @property
    def particles(self) -> np.ndarray:
        return self._particles

    @property
    def n(self) -> int:
        return self._particles.shape[0]

    @property
    def dimension(self) -> int:
        return self._particles.shape[1]

    def __len__(self):
        return self.n

    def mean(self) -> np.ndarray:
        return self._particles.mean(axis=0)

    def max_norm(self) -> float:
        return float(np.linalg.norm(self._particles, axis=1).max())

    def permuted(self, order: np.ndarray) -> "Ensemble":
        return Ensemble(self._particles[np.asarray(order)])

    def head(self, n: int) -> "Ensemble":
        return Ensemble(self._particles[:n])

    def __repr__(self):
        return f"Ensemble<n={self.n}, d={self.dimension}>"


class PopulationKind(str, Enum):
    UNIFORM_BALL = "uniform_ball"
    TRUNCATED_GAUSSIAN = "truncated_gaussian"
    POINT_CLUSTERS = "point_clusters"


@dataclass
class PopulationSpec:
    """Population law of the context; every draw lies in the closed ball of ``radius``."""

    kind: str = PopulationKind.UNIFORM_BALL.value
    # 0 inherits the experiment dimension
    dimension: int = 0
    radius: float = 1.0
    # truncated_gaussian
    sigma: float = 0.5
    # point_clusters
    centers: list[list[float]] | None = None
    spread: float = 0.0

    def __post_init__(self):
        try:
            kind = PopulationKind(self.kind)
        except ValueError:
            valid = ", ".join(k.value for k in PopulationKind)
            msg = f"population.kind: unknown kind {self.kind!r}, expected one of {valid}"
            raise ConfigError(msg) from None
        if self.dimension < 0:
            msg = f"population.dimension must be non-negative, got {self.dimension}"
            raise ConfigError(msg)
        if self.radius <= 0:
            msg = f"population.radius must be positive, got {self.radius}"
            raise ConfigError(msg)
        if kind is PopulationKind.TRUNCATED_GAUSSIAN and self.sigma <= 0:
            msg = f"population.sigma must be positive, got {self.sigma}"
            raise ConfigError(msg)
        if kind is PopulationKind.POINT_CLUSTERS and self.dimension > 0:
            self._check_centers()

    def _check_centers(self):
        if not self.centers:
            msg = "population.centers is required for point_clusters"
            raise ConfigError(msg)
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[1] != self.dimension:
            msg = f"population.centers must be a list of {self.dimension}-vectors"
            raise ConfigError(msg)
        if np.linalg.norm(centers, axis=1).max() > self.radius:
            msg = f"population.centers must lie inside the ball of radius {self.radius}"
            raise ConfigError(msg)
        if self.spread < 0:
            msg = f"population.spread must be non-negative, got {self.spread}"
            raise ConfigError(msg)

    @property
    def population_kind(self) -> PopulationKind:
        return PopulationKind(self.kind)


def uniform_ball(generator: np.random.Generator, count: int, dimension: int, radius: float) -> np.ndarray:
    directions = generator.standard_normal((count, dimension))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    radii = radius * generator.random((count, 1)) ** (1.0 / dimension)
    return directions / norms * radii


def sample_ensemble(spec: PopulationSpec, n: int, rng: RngHandle) -> Ensemble:
    """Draws ``n`` i.i.d. particles from ``spec`` on the stream of ``rng``."""
    if n < 1:
        msg = f"ensemble size must be >= 1, got {n}"
        raise ConfigError(msg)
    if spec.dimension < 1:
        msg = "population dimension is not set"
        raise ConfigError(msg)
    generator = rng.generator()
    kind = spec.population_kind
    if kind is PopulationKind.UNIFORM_BALL:
        return Ensemble(uniform_ball(generator, n, spec.dimension, spec.radius))
    if kind is PopulationKind.TRUNCATED_GAUSSIAN:
        return Ensemble(_rejection(spec, n, generator, _gaussian_proposal))
    return Ensemble(_rejection(spec, n, generator, _cluster_proposal))


def _gaussian_proposal(spec: PopulationSpec, count: int, generator: np.random.Generator) -> np.ndarray:
    return spec.sigma * generator.standard_normal((count, spec.dimension))


def _cluster_proposal(spec: PopulationSpec, count: int, generator: np.random.Generator) -> np.ndarray:
    centers = np.asarray(spec.centers, dtype=np.float64)
    picks = generator.integers(len(centers), size=count)
    return centers[picks] + spec.spread * generator.standard_normal((count, spec.dimension))


def _rejection(spec: PopulationSpec, n: int, generator: np.random.Generator, proposal) -> np.ndarray:
    accepted: list[np.ndarray] = []
    have = 0
    rejected = 0
    while have < n:
        batch = proposal(spec, max(2 * (n - have), 16), generator)
        keep = batch[np.linalg.norm(batch, axis=1) <= spec.radius]
        rejected += len(batch) - len(keep)
        if rejected > MAX_REJECTIONS:
            msg = f"{spec.kind}: more than {MAX_REJECTIONS} rejections while drawing {n} particles"
            raise SamplingError(msg)
        keep = keep[: n - have]
        accepted.append(keep)
        have += len(keep)
    if rejected:
        logger.debug(f"{spec.kind}: rejected {rejected} proposals for {n} particles")
    return np.concatenate(accepted, axis=0)


@dataclass(frozen=True)
class Sample:
    """One observation triple: token, context, target."""

    x0: np.ndarray
    context: PopulationSpec | Ensemble
    y0: np.ndarray

    def materialize(self, n: int, rng: RngHandle) -> Ensemble:
        if isinstance(self.context, Ensemble):
            return self.context
        return sample_ensemble(self.context, n, rng)
