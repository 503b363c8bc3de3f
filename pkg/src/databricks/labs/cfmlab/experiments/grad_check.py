"""Adjoint gradients against central finite differences over a sweep of schedules, depths and
context sizes."""

import logging
import math
from dataclasses import dataclass

from databricks.labs.cfmlab.adjoint import gradient_fd_check
from databricks.labs.cfmlab.config import MIXED
from databricks.labs.cfmlab.core.ensemble import Sample
from databricks.labs.cfmlab.core.params import Family, ParameterPath
from databricks.labs.cfmlab.core.rng import Stream
from databricks.labs.cfmlab.errors import UnsupportedFamilyError
from databricks.labs.cfmlab.experiments.base import ExperimentBase, SummaryRow, banded, token_and_target

logger = logging.getLogger(__name__)

DEFAULT_CELLS = (Family.ATTENTION.value, Family.MLP.value, MIXED)
DEFAULT_LAYERS = (1, 2, 4)
MLP_TOLERANCE = 1e-5
SINGLE_PARTICLE_TOLERANCE = 1e-4
TOLERANCE = 1e-3
MIN_SHRINK = 2.0
# below this the coarse error is finite-difference noise, not discretization
SHRINK_FLOOR = 1e-7


@dataclass
class GradCheckRow:
    cell: str
    layers: int
    n: int
    instance: int
    direction: int
    analytic: float
    finite_difference: float
    rel_error: float
    rel_error_fine: float


@dataclass(frozen=True)
class Cell:
    kind: str
    layers: int
    n: int

    @property
    def schedule(self) -> list[Family]:
        if self.kind == MIXED:
            return [Family.ATTENTION if i % 2 == 0 else Family.MLP for i in range(self.layers)]
        return [Family(self.kind)] * self.layers

    @property
    def tolerance(self) -> float:
        if self.kind == Family.MLP.value:
            return MLP_TOLERANCE
        if self.kind == Family.ATTENTION.value and self.n == 1:
            return SINGLE_PARTICLE_TOLERANCE
        return TOLERANCE

    def __str__(self):
        return f"{self.kind}/L={self.layers}/n={self.n}"


class GradCheck(ExperimentBase[GradCheckRow]):
    name = "grad-check"
    raw_klass = GradCheckRow

    @property
    def cells(self) -> list[Cell]:
        kinds = self._cfg.families or list(DEFAULT_CELLS)
        if Family.NEAREST.value in kinds:
            msg = f"{self.name}: the {Family.NEAREST.value} family has no gradient"
            raise UnsupportedFamilyError(msg)
        layers = self._cfg.layers_list or list(DEFAULT_LAYERS)
        return [Cell(kind, L, n) for kind in kinds for L in layers for n in self._cfg.sizes]

    def trials(self) -> list[GradCheckRow]:
        tasks = []
        for index, cell in enumerate(self.cells):
            for instance in range(self._cfg.instances):
                tasks.append(self._indexed(len(tasks), self._check, index, cell, instance))
        rows: list[GradCheckRow] = []
        for chunk in self._gather("finite-difference checks", tasks):
            rows.extend(chunk)
        return rows

    def _check(self, index: int, cell: Cell, instance: int) -> list[GradCheckRow]:
        cfg = self._cfg
        rng = cfg.rng().child(Stream.GRAD_CHECK, index, instance)
        theta = ParameterPath.random(cell.schedule, cfg.dimension, rng.child(Stream.PARAMS), cfg.path_spec.init_scale)
        x0, y0 = token_and_target(cfg, rng.child(Stream.TOKEN))
        sample = Sample(x0, cfg.population_spec, y0)
        report = gradient_fd_check(sample, theta, cfg.integration, cfg.directions, rng, context_size=cell.n)
        logger.debug(f"{cell} #{instance}: max rel error {report.max_rel_error:.3g}")
        return [
            GradCheckRow(
                cell.kind,
                cell.layers,
                cell.n,
                instance,
                direction.index,
                direction.analytic,
                direction.finite_difference,
                direction.rel_error,
                direction.rel_error_fine,
            )
            for direction in report.per_direction
        ]

    def summarize(self, raw: list[GradCheckRow]) -> list[SummaryRow]:
        summary = []
        for cell in self.cells:
            rows = [r for r in raw if (r.cell, r.layers, r.n) == (cell.kind, cell.layers, cell.n)]
            coarse = max(r.rel_error for r in rows)
            fine = max(r.rel_error_fine for r in rows)
            label = str(cell)
            summary.append(banded("max_rel_error", coarse, 0.0, cell.tolerance, asserted=True, n=cell.n, note=label))
            if coarse <= SHRINK_FLOOR:
                summary.append(SummaryRow("shrink", n=cell.n, value=math.nan, note=f"{label}; at noise floor"))
                continue
            shrink = coarse / fine if fine > 0 else math.inf
            summary.append(banded("shrink", shrink, MIN_SHRINK, math.inf, asserted=True, n=cell.n, note=label))
            summary.append(SummaryRow("observed_order", n=cell.n, value=math.log2(shrink), note=label))
        return summary
