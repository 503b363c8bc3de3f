"""Audit of the closed-form derivative bounds against measured norms on random draws inside the
parameter ball of radius ``M`` and the spatial ball of radius ``R``.
"""

import dataclasses
import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from databricks.labs.cfmlab.core.ensemble import Ensemble, uniform_ball
from databricks.labs.cfmlab.core.params import Family, LayerParams
from databricks.labs.cfmlab.core.rng import Stream
from databricks.labs.cfmlab.errors import BoundViolationError, UnsupportedFamilyError
from databricks.labs.cfmlab.experiments.base import ExperimentBase, ExperimentResult, SummaryRow, banded
from databricks.labs.cfmlab.velocity import eval_velocity, jac_x, kernel_form_eval, wasserstein_jac
from databricks.labs.cfmlab.velocity.bounds import (
    TheoreticalBound,
    family_bounds,
    operator_norm,
    second_derivative_norm,
    theta_jacobian,
)

logger = logging.getLogger(__name__)

BOUND_SLACK = 1e-8
KERNEL_TOLERANCE = 1e-12
CHUNK_SAMPLES = 500
KERNEL_IDENTITY = "kernel_identity"


@dataclass
class AuditRow:
    family: str
    bound: str
    sample: int
    observed: float
    limit: float
    ratio: float


@dataclass
class MeasuredConstant:
    name: str
    family: str
    value: float
    samples: int


@dataclass
class BoundsLedger:
    M: float
    R: float
    samples: int
    measured: list[MeasuredConstant] = field(default_factory=list)
    theoretical: list[TheoreticalBound] = field(default_factory=list)


def _ratio(observed: float, limit: float) -> float:
    if limit > 0:
        return observed / limit
    return 0.0 if observed == 0 else float("inf")


def _violates(row: AuditRow) -> bool:
    if row.bound == KERNEL_IDENTITY:
        return row.observed > row.limit
    return row.observed > row.limit * (1.0 + BOUND_SLACK)


def _measurements(layer: LayerParams, x: np.ndarray, mu: Ensemble, z: np.ndarray, u: np.ndarray):
    """Observed norm for every audited quantity of the layer's family."""
    checks: dict[str, Callable[[], float]] = {
        "jac_x": lambda: operator_norm(jac_x(layer, x, mu)),
        "jac_theta": lambda: operator_norm(theta_jacobian(layer, x, mu)),
        "jac_x_second": lambda: second_derivative_norm(layer, x, mu, u),
    }
    if layer.family is Family.ATTENTION:
        checks["wasserstein_jac"] = lambda: operator_norm(wasserstein_jac(layer, x, mu, z))
        checks[KERNEL_IDENTITY] = lambda: float(
            np.linalg.norm(kernel_form_eval(layer, x, mu) - eval_velocity(layer, x, mu))
        )
    return checks


class LipschitzAudit(ExperimentBase[AuditRow]):
    name = "lipschitz-audit"
    raw_klass = AuditRow

    @property
    def families(self) -> list[Family]:
        names = self._cfg.families or [Family.ATTENTION.value, Family.MLP.value]
        families = []
        for name in names:
            if name not in {Family.ATTENTION.value, Family.MLP.value}:
                msg = f"{self.name}: no derivative bounds for {name!r}"
                raise UnsupportedFamilyError(msg)
            families.append(Family(name))
        return families

    @property
    def radius(self) -> float:
        return self._cfg.population_spec.radius

    def trials(self) -> list[AuditRow]:
        samples = self._cfg.samples
        tasks = []
        for index, family in enumerate(self.families):
            for start in range(0, samples, CHUNK_SAMPLES):
                stop = min(start + CHUNK_SAMPLES, samples)
                tasks.append(self._indexed(len(tasks), self._chunk, index, family, start, stop))
        rows: list[AuditRow] = []
        for chunk in self._gather("bound audit", tasks):
            rows.extend(chunk)
        return rows

    def _chunk(self, index: int, family: Family, start: int, stop: int) -> list[AuditRow]:
        cfg = self._cfg
        M, R, d = cfg.bound_m, self.radius, cfg.dimension
        limits = {bound.name: bound.value for bound in family_bounds(family, M, R)}
        generator = cfg.rng().child(Stream.LIPSCHITZ_AUDIT, index, start).generator()
        rows = []
        for sample in range(start, stop):
            layer = LayerParams.random(family, d, generator, M)
            points = uniform_ball(generator, cfg.context_size + 2, d, R)
            x, z, mu = points[0], points[1], Ensemble(points[2:])
            u = generator.standard_normal(d)
            for name, measure in _measurements(layer, x, mu, z, u).items():
                observed = measure()
                if name == KERNEL_IDENTITY:
                    limit = KERNEL_TOLERANCE
                else:
                    limit = limits[name]
                rows.append(AuditRow(family.value, name, sample, observed, limit, _ratio(observed, limit)))
        return rows

    def summarize(self, raw: list[AuditRow]) -> list[SummaryRow]:
        worst: dict[tuple[str, str], AuditRow] = {}
        for row in raw:
            key = (row.family, row.bound)
            if key not in worst or row.ratio > worst[key].ratio:
                worst[key] = row
        summary = []
        for (family, bound), row in worst.items():
            upper = 1.0 if bound == KERNEL_IDENTITY else 1.0 + BOUND_SLACK
            note = f"{family}; witness sample {row.sample}"
            summary.append(banded(f"{family}.{bound}.max_ratio", row.ratio, 0.0, upper, asserted=True, note=note))
        return summary

    def ledger(self, raw: list[AuditRow]) -> BoundsLedger:
        cfg = self._cfg
        ledger = BoundsLedger(cfg.bound_m, self.radius, cfg.samples)
        for family in self.families:
            ledger.theoretical.extend(family_bounds(family, cfg.bound_m, self.radius))
            for bound in ("jac_x", "jac_theta", "wasserstein_jac"):
                observed = [row.observed for row in raw if row.family == family.value and row.bound == bound]
                if observed:
                    ledger.measured.append(MeasuredConstant(bound, family.value, max(observed), len(observed)))
        return ledger

    def run(self, *, strict: bool = True) -> ExperimentResult:
        logger.info(f"[{self.name}] auditing {self._cfg.samples} draws per family")
        raw = self.trials()
        summary = self.summarize(raw)
        self._save(raw, summary)
        self._backend.save_json(f"{self.name}.ledger.json", dataclasses.asdict(self.ledger(raw)))
        violations = [row for row in raw if _violates(row)]
        if violations:
            worst = max(violations, key=lambda row: row.ratio)
            for row in violations:
                label = f"{row.family}.{row.bound} sample {row.sample}"
                logger.error(f"[{self.name}] {label}: {row.observed} > {row.limit}")
            witness = f"{worst.family} sample {worst.sample}, seed {self._cfg.master_seed}, M={self._cfg.bound_m}"
            raise BoundViolationError(f"{worst.family}.{worst.bound}", worst.observed, worst.limit, witness)
        return ExperimentResult(self.name, summary)
