"""Wasserstein-1 distances between equal-weight empirical measures and log-log rate fits."""

import logging
from collections import defaultdict
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np
import ot
from scipy import stats
from scipy.spatial.distance import cdist

from databricks.labs.cfmlab.core.ensemble import Ensemble
from databricks.labs.cfmlab.core.rng import RngHandle
from databricks.labs.cfmlab.errors import ConfigError, DegenerateRateError, NumericalError, TransportSizeError

logger = logging.getLogger(__name__)

__all__ = [
    "RateFit",
    "TransportPlan",
    "exact_w1_feasible",
    "fit_rate",
    "per_n_stats",
    "w1_exact",
    "w1_sliced",
]

MAX_TRANSPORT_CELLS = 2**22
_SIMPLEX_ITERATIONS = 100_000_000


@dataclass(frozen=True)
class TransportPlan:
    flows: list[tuple[int, int, float]]
    cost: float
    n_a: int
    n_b: int

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        rows = np.zeros(self.n_a)
        cols = np.zeros(self.n_b)
        for i, j, mass in self.flows:
            rows[i] += mass
            cols[j] += mass
        return rows, cols


def exact_w1_feasible(n_a: int, n_b: int) -> bool:
    return n_a * n_b <= MAX_TRANSPORT_CELLS


def w1_exact(a: Ensemble, b: Ensemble) -> tuple[float, TransportPlan]:
    """Optimal transport cost with Euclidean ground cost, solved by the network simplex."""
    if a.dimension != b.dimension:
        msg = f"dimension mismatch: {a!r} vs {b!r}"
        raise ConfigError(msg)
    if not exact_w1_feasible(a.n, b.n):
        msg = f"exact W1 on {a.n}x{b.n} exceeds the {MAX_TRANSPORT_CELLS} cell cap; use w1_sliced"
        raise TransportSizeError(msg)
    cost = cdist(a.particles, b.particles)
    wa = np.full(a.n, 1.0 / a.n)
    wb = np.full(b.n, 1.0 / b.n)
    plan, log = ot.emd(wa, wb, cost, numItermax=_SIMPLEX_ITERATIONS, log=True)
    if log.get("warning"):
        msg = f"network simplex on {a.n}x{b.n}: {log['warning']}"
        raise NumericalError(msg)
    rows, cols = np.nonzero(plan)
    flows = [(int(i), int(j), float(plan[i, j])) for i, j in zip(rows, cols, strict=True)]
    distance = float(np.sum(plan[rows, cols] * cost[rows, cols]))
    return distance, TransportPlan(flows, distance, a.n, b.n)


def w1_sliced(a: Ensemble, b: Ensemble, projections: int, rng: RngHandle) -> float:
    """Mean over random unit directions of the 1D W1 between the projected samples."""
    if projections < 1:
        msg = f"projections must be >= 1, got {projections}"
        raise ConfigError(msg)
    directions = rng.generator().standard_normal((projections, a.dimension))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return float(ot.sliced_wasserstein_distance(a.particles, b.particles, projections=directions.T, p=1))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    stderr: float
    points: list[tuple[float, float]]

    def predict(self, n: float) -> float:
        return float(np.exp(self.intercept) * n**self.slope)


@dataclass(frozen=True)
class NStats:
    n: int
    mean: float
    stderr: float
    count: int


def per_n_stats(points: Iterable[tuple[int, float]]) -> list[NStats]:
    """Mean and standard error of the values observed at each ``n``, ascending in ``n``."""
    grouped: dict[int, list[float]] = defaultdict(list)
    for n, value in points:
        grouped[int(n)].append(float(value))
    out = []
    for n in sorted(grouped):
        values = np.array(grouped[n])
        stderr = float(stats.sem(values)) if len(values) > 1 else 0.0
        out.append(NStats(n, float(values.mean()), stderr, len(values)))
    return out


def fit_rate(points: Iterable[tuple[int, float]]) -> RateFit:
    """Ordinary least squares of ``ln value`` on ``ln n`` after averaging repeats at equal ``n``.

    Every individual value must be positive, not only the averages.
    """
    points = [(int(n), float(value)) for n, value in points]
    bad = sorted({n for n, value in points if not value > 0})
    if bad:
        msg = f"a rate fit needs positive values, got non-positive values at n={bad}"
        raise DegenerateRateError(msg)
    averaged = per_n_stats(points)
    if len(averaged) < 3:
        msg = f"a rate fit needs at least 3 distinct n, got {len(averaged)}"
        raise DegenerateRateError(msg)
    log_n = np.log([s.n for s in averaged])
    log_v = np.log([s.mean for s in averaged])
    result = stats.linregress(log_n, log_v)
    r_squared = float(min(max(result.rvalue**2, 0.0), 1.0)) if np.isfinite(result.rvalue) else 1.0
    return RateFit(
        slope=float(result.slope),
        intercept=float(result.intercept),
        r_squared=r_squared,
        stderr=float(result.stderr),
        points=[(float(x), float(y)) for x, y in zip(log_n, log_v, strict=True)],
    )
