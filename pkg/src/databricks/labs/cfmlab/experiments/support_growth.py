"""Growth of the context support along the attention flow against ``e^{|θ|_{L∞}} R``."""

import logging
from dataclasses import dataclass

from databricks.labs.cfmlab.core.ensemble import sample_ensemble
from databricks.labs.cfmlab.core.params import Family, ParameterPath, PathNorm, path_norm
from databricks.labs.cfmlab.core.rng import Stream
from databricks.labs.cfmlab.errors import BoundViolationError, UnsupportedFamilyError
from databricks.labs.cfmlab.experiments.base import (
    ExperimentBase,
    ExperimentResult,
    SummaryRow,
    banded,
    token_and_target,
)
from databricks.labs.cfmlab.flow import integrate_forward
from databricks.labs.cfmlab.velocity.bounds import discrete_support_bound, support_bound

logger = logging.getLogger(__name__)


@dataclass
class SupportRow:
    instance: int
    substeps: int
    step: int
    s: float
    max_particle_norm: float
    bound: float
    continuous_bound: float


class SupportGrowth(ExperimentBase[SupportRow]):
    name = "support-growth"
    raw_klass = SupportRow

    @property
    def ladder(self) -> list[int]:
        return self._cfg.substep_ladder or [self._cfg.integration.substeps_per_layer]

    def trials(self) -> list[SupportRow]:
        families = self._cfg.path_spec.families
        if any(family is not Family.ATTENTION for family in families):
            msg = f"{self.name} audits the attention flow, got schedule {self._cfg.path_spec.schedule}"
            raise UnsupportedFamilyError(msg)
        tasks = [self._indexed(i, self._instance, i) for i in range(self._cfg.instances)]
        rows: list[SupportRow] = []
        for chunk in self._gather("support growth", tasks):
            rows.extend(chunk)
        return rows

    def _instance(self, index: int) -> list[SupportRow]:
        cfg = self._cfg
        rng = cfg.rng().child(Stream.SUPPORT_GROWTH, index)
        R = cfg.population_spec.radius
        theta = ParameterPath.random(cfg.path_spec.families, cfg.dimension, rng.child(Stream.PARAMS), cfg.bound_m)
        x0, _ = token_and_target(cfg, rng.child(Stream.TOKEN))
        mu0 = sample_ensemble(cfg.population_spec, cfg.context_size, rng.child(Stream.CONTEXT))
        theta_linf = path_norm(theta, PathNorm.LINF)
        rows = []
        for m in self.ladder:
            integrator = cfg.integration.with_substeps(m)
            traj = integrate_forward(x0, mu0, theta, integrator)
            bound = discrete_support_bound(theta_linf, R, traj.h)
            continuous = support_bound(theta_linf, R)
            for step, (s, norm) in enumerate(zip(traj.grid, traj.max_particle_norms(), strict=True)):
                rows.append(SupportRow(index, m, step, float(s), float(norm), bound, continuous))
        return rows

    def summarize(self, raw: list[SupportRow]) -> list[SummaryRow]:
        summary = []
        for m in self.ladder:
            rows = [row for row in raw if row.substeps == m]
            ratio = max(row.max_particle_norm / row.bound for row in rows)
            overshoot = max(row.max_particle_norm / row.continuous_bound for row in rows) - 1.0
            summary.append(banded("support.max_ratio", ratio, 0.0, 1.0, asserted=True, note=f"m={m}"))
            summary.append(SummaryRow("support.overshoot", value=overshoot, note=f"m={m}"))
        return summary

    def run(self, *, strict: bool = True) -> ExperimentResult:
        result = super().run(strict=False)
        violations = [row for row in result.summary if row.failed]
        if violations:
            worst = max(violations, key=lambda row: row.value)
            raise BoundViolationError("support growth", worst.value, 1.0, f"ratio to e^M R (1 + 10h), {worst.note}")
        return result
