"""Stability of the flow and of the loss gradient under perturbations of the initial context,
the token and the parameters, on a geometric ladder of magnitudes.

Independently of the ladder, random pairs of inputs on the configured path are checked against the
flow stability envelope ``e^{3L̂} (W1(μ_0, μ̃_0) + |x_0 - x̃_0|)``.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from databricks.labs.cfmlab.adjoint import LossEvaluation, loss_and_gradient
from databricks.labs.cfmlab.core.ensemble import Ensemble, sample_ensemble, uniform_ball
from databricks.labs.cfmlab.core.params import ParameterPath, PathNorm, layer_direction, path_axpy, path_distance
from databricks.labs.cfmlab.core.rng import RngHandle, Stream
from databricks.labs.cfmlab.errors import ConfigError, UnsupportedFamilyError
from databricks.labs.cfmlab.experiments.base import ExperimentBase, SummaryRow, banded, token_and_target
from databricks.labs.cfmlab.experiments.forward_poc import sup_context_w1, sup_token_deviation
from databricks.labs.cfmlab.flow import StabilityEnvelope, check_stability_envelope, integrate_forward
from databricks.labs.cfmlab.metrics import w1_exact

logger = logging.getLogger(__name__)

# per-rung output ratio while the input halves
LINEAR_RESPONSE = (0.3, 0.7)
# gradient-to-flow ratio of any rung against the finest rung of the same ladder
GRADIENT_ENVELOPE = 2.0


class PerturbationKind(str, Enum):
    CONTEXT = "context"
    TOKEN = "token"
    THETA = "theta"


@dataclass
class StabilityRow:
    instance: int
    perturbation_kind: str
    rung: int
    input_delta: float
    token_delta: float
    measure_delta: float
    gradient_delta: float
    output_delta: float
    ratio: float
    gradient_ratio: float


@dataclass(frozen=True)
class _Instance:
    x0: np.ndarray
    y0: np.ndarray
    mu0: Ensemble
    theta: ParameterPath
    base: LossEvaluation
    rng: RngHandle


def _ratio(output: float, given: float) -> float:
    return output / given if given > 0 else 0.0


def jitter(mu: Ensemble, magnitude: float, rng: RngHandle) -> Ensemble:
    """Moves every particle by ``magnitude`` along its own random unit direction."""
    directions = rng.generator().standard_normal(mu.particles.shape)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return Ensemble(mu.particles + magnitude * directions)


def perturb_one_layer(theta: ParameterPath, magnitude: float, rng: RngHandle) -> tuple[ParameterPath, int]:
    """Moves one seeded layer by ``magnitude`` along a unit direction; the other layers are untouched.

    Equal handles pick the same layer and direction, so a ladder only rescales the perturbation.
    """
    layer = int(rng.child(0).generator().integers(theta.L))
    direction = layer_direction(theta, layer, rng.child(1))
    return path_axpy(magnitude, direction, 1.0, theta), layer


class Stability(ExperimentBase[StabilityRow]):
    name = "stability"
    raw_klass = StabilityRow

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._envelopes: list[StabilityEnvelope] = []

    @property
    def envelopes(self) -> list[StabilityEnvelope]:
        return self._envelopes

    def trials(self) -> list[StabilityRow]:
        cfg = self._cfg
        if cfg.perturbation < 0:
            msg = f"perturbation must be non-negative, got {cfg.perturbation}"
            raise ConfigError(msg)
        theta = cfg.build_path()
        if not theta.differentiable():
            msg = f"{self.name} needs a differentiable schedule, got {cfg.path_spec.schedule}"
            raise UnsupportedFamilyError(msg)
        pairs = [self._indexed(p, self._envelope_pair, theta, p) for p in range(cfg.pairs)]
        self._envelopes = self._gather("flow stability envelope", pairs)
        tasks = [self._indexed(i, self._instance, theta, i) for i in range(cfg.instances)]
        rows: list[StabilityRow] = []
        for chunk in self._gather("perturbation ladders", tasks):
            rows.extend(chunk)
        return rows

    def _envelope_pair(self, theta: ParameterPath, pair: int) -> StabilityEnvelope:
        cfg = self._cfg
        population = cfg.population_spec
        rng = cfg.rng().child(Stream.FLOW_ENVELOPE, pair)
        tokens = uniform_ball(rng.child(Stream.TOKEN).generator(), 2, cfg.dimension, population.radius)
        solves = []
        for side, x0 in enumerate(tokens):
            mu0 = sample_ensemble(population, cfg.context_size, rng.child(Stream.CONTEXT, side))
            solves.append(integrate_forward(x0, mu0, theta, cfg.integration))
        return check_stability_envelope(solves[0], solves[1], theta)

    def _instance(self, theta: ParameterPath, index: int) -> list[StabilityRow]:
        cfg = self._cfg
        rng = cfg.rng().child(Stream.STABILITY, index)
        x0, y0 = token_and_target(cfg, rng.child(Stream.TOKEN))
        mu0 = sample_ensemble(cfg.population_spec, cfg.context_size, rng.child(Stream.CONTEXT))
        base = loss_and_gradient(x0, mu0, y0, theta, cfg.integration)
        instance = _Instance(x0, y0, mu0, theta, base, rng.child(Stream.PERTURBATION))
        rows = []
        for axis, kind in enumerate(PerturbationKind):
            for rung in range(cfg.rungs):
                magnitude = cfg.perturbation * 0.5**rung
                rows.append(self._perturbed(instance, index, axis, kind, rung, magnitude))
        return rows

    def _perturbed(
        self, instance: _Instance, index: int, axis: int, kind: PerturbationKind, rung: int, magnitude: float
    ) -> StabilityRow:
        cfg = self._cfg
        # one direction per axis so the rungs only rescale it
        rng = instance.rng.child(axis)
        x0, mu0, theta = instance.x0, instance.mu0, instance.theta
        if kind is PerturbationKind.CONTEXT:
            mu0 = jitter(mu0, magnitude, rng)
            given, _ = w1_exact(instance.mu0, mu0)
        elif kind is PerturbationKind.TOKEN:
            unit = rng.generator().standard_normal(cfg.dimension)
            unit /= np.linalg.norm(unit)
            x0 = x0 + magnitude * unit
            given = magnitude
        else:
            theta, _ = perturb_one_layer(theta, magnitude, rng)
            given = path_distance(theta, instance.theta, PathNorm.L1)
        perturbed = loss_and_gradient(x0, mu0, instance.y0, theta, cfg.integration)
        token_delta = sup_token_deviation(instance.base.trajectory, perturbed.trajectory)
        measure_delta, _, _ = sup_context_w1(
            instance.base.trajectory, perturbed.trajectory, cfg.projections, rng.child(Stream.PROJECTIONS)
        )
        gradient_delta = path_distance(instance.base.gradient, perturbed.gradient)
        output_delta = max(token_delta, measure_delta)
        logger.debug(f"instance {index} {kind.value} rung {rung}: input {given:.3g} output {output_delta:.3g}")
        return StabilityRow(
            index,
            kind.value,
            rung,
            given,
            token_delta,
            measure_delta,
            gradient_delta,
            output_delta,
            _ratio(output_delta, given),
            _ratio(gradient_delta, given),
        )

    def summarize(self, raw: list[StabilityRow]) -> list[SummaryRow]:
        summary = self._envelope_rows()
        for kind in PerturbationKind:
            rows = [row for row in raw if row.perturbation_kind == kind.value]
            summary.append(SummaryRow(f"{kind.value}.max_ratio", value=max(r.ratio for r in rows)))
            summary.append(SummaryRow(f"{kind.value}.max_gradient_ratio", value=max(r.gradient_ratio for r in rows)))
            envelope = [_ratio(r.gradient_ratio, r.ratio) for r in rows if r.ratio > 0]
            if envelope:
                summary.append(SummaryRow(f"{kind.value}.gradient_to_flow_ratio", value=max(envelope)))
            summary.append(self._gradient_envelope_row(kind, rows))
            summary.extend(self._ladder_rows(kind, rows))
        return summary

    def _envelope_rows(self) -> list[SummaryRow]:
        if not self._envelopes:
            return []
        worst = max(e.ratio for e in self._envelopes)
        note = f"pairs={len(self._envelopes)}"
        return [
            banded("flow_envelope.max_ratio", worst, 0.0, 1.0, asserted=True, note=note),
            SummaryRow("flow_envelope.max_lipschitz", value=max(e.lipschitz for e in self._envelopes), note=note),
        ]

    def _gradient_envelope_row(self, kind: PerturbationKind, rows: list[StabilityRow]) -> SummaryRow:
        """Largest gradient-to-flow ratio of any rung relative to the finest rung of its ladder."""
        finest = self._cfg.rungs - 1
        worst = 0.0
        for instance in sorted({r.instance for r in rows}):
            ladder = {r.rung: r for r in rows if r.instance == instance}
            constant = _ratio(ladder[finest].gradient_ratio, ladder[finest].ratio)
            for row in ladder.values():
                if row.ratio == 0 or row.gradient_ratio == 0:
                    continue
                if constant == 0:
                    worst = float("inf")
                    continue
                worst = max(worst, row.gradient_ratio / (row.ratio * constant))
        asserted = self._cfg.perturbation > 0 and finest > 0
        return banded(
            f"{kind.value}.gradient_envelope", worst, 0.0, GRADIENT_ENVELOPE, asserted=asserted, note="finest rung"
        )

    def _ladder_rows(self, kind: PerturbationKind, rows: list[StabilityRow]) -> list[SummaryRow]:
        """Mean output at each rung relative to the previous one; asserted for the parameter axis."""
        means = []
        for rung in range(self._cfg.rungs):
            means.append(float(np.mean([r.output_delta for r in rows if r.rung == rung])))
        out = []
        asserted = kind is PerturbationKind.THETA and self._cfg.perturbation > 0
        lower, upper = LINEAR_RESPONSE
        for rung in range(1, len(means)):
            if means[rung - 1] == 0:
                out.append(SummaryRow(f"{kind.value}.rung_ratio", value=0.0, note=f"rung={rung}, zero output"))
                continue
            ratio = means[rung] / means[rung - 1]
            out.append(banded(f"{kind.value}.rung_ratio", ratio, lower, upper, asserted=asserted, note=f"rung={rung}"))
        return out
