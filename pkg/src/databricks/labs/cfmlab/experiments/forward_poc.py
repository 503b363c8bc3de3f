"""Forward propagation of chaos: a finite context of ``n`` particles against an ``n_ref``-particle
proxy of the population, integrated with the same parameters from the same token.
"""

import logging
from dataclasses import dataclass

import numpy as np

from databricks.labs.cfmlab.core.ensemble import Ensemble, sample_ensemble
from databricks.labs.cfmlab.core.params import Family, ParameterPath
from databricks.labs.cfmlab.core.rng import RngHandle, Stream
from databricks.labs.cfmlab.experiments.base import (
    ExperimentBase,
    SummaryRow,
    per_n_rows,
    quantile_rows,
    rate_band,
    reference_bias_row,
    slope_rows,
    token_and_target,
    w1,
)
from databricks.labs.cfmlab.flow import Trajectory, integrate_forward

logger = logging.getLogger(__name__)

SHARP_BAND = (-0.65, -0.35)
# asserted only at d = 3
W1_BAND = (-0.45, -0.22)
W1_DIMENSION = 3


@dataclass
class ForwardPocRow:
    n: int
    repeat: int
    sup_dev_x: float
    sup_w1: float
    w1_initial: float
    w1_method: str


def sup_token_deviation(a: Trajectory, b: Trajectory) -> float:
    return float(np.max(np.linalg.norm(a.x_states - b.x_states, axis=1)))


def sup_context_w1(a: Trajectory, b: Trajectory, projections: int, rng: RngHandle) -> tuple[float, float, str]:
    """W1 between the two contexts at every layer boundary; returns (sup, initial, method)."""
    values = []
    methods = set()
    for index, step in enumerate(a.layer_boundaries()):
        distance, method = w1(a.context_at(int(step)), b.context_at(int(step)), projections, rng.child(index))
        values.append(distance)
        methods.add(method)
    return max(values), values[0], "exact" if methods == {"exact"} else "sliced"


class ForwardPoc(ExperimentBase[ForwardPocRow]):
    name = "poc-forward"
    raw_klass = ForwardPocRow

    def trials(self) -> list[ForwardPocRow]:
        theta = self._cfg.build_path()
        tasks = [self._indexed(r, self._repeat, theta, r) for r in range(self._cfg.repeats)]
        rows: list[ForwardPocRow] = []
        for chunk in self._gather("forward deviations", tasks):
            rows.extend(chunk)
        return rows

    def _repeat(self, theta: ParameterPath, repeat: int) -> list[ForwardPocRow]:
        cfg = self._cfg
        rng = cfg.rng().child(Stream.FORWARD_POC, repeat)
        x0, _ = token_and_target(cfg, rng.child(Stream.TOKEN))
        reference = sample_ensemble(cfg.population_spec, cfg.n_ref, rng.child(Stream.REFERENCE))
        ref_traj = integrate_forward(x0, reference, theta, cfg.integration)
        rows = []
        for n in cfg.sizes:
            if cfg.coupled:
                empirical: Ensemble = reference.head(n)
            else:
                empirical = sample_ensemble(cfg.population_spec, n, rng.child(Stream.EMPIRICAL_CONTEXT, n))
            traj = integrate_forward(x0, empirical, theta, cfg.integration)
            sup_w1, initial, method = sup_context_w1(traj, ref_traj, cfg.projections, rng.child(Stream.PROJECTIONS, n))
            rows.append(ForwardPocRow(n, repeat, sup_token_deviation(traj, ref_traj), sup_w1, initial, method))
            logger.debug(f"repeat {repeat} n={n}: sup|x - x̂|={rows[-1].sup_dev_x:.6g}")
        return rows

    def summarize(self, raw: list[ForwardPocRow]) -> list[SummaryRow]:
        cfg = self._cfg
        d = cfg.dimension
        kernel_form = Family.NEAREST not in cfg.path_spec.families
        all_exact = all(row.w1_method == "exact" for row in raw)
        dev = [(row.n, row.sup_dev_x) for row in raw]
        sup_w1 = [(row.n, row.sup_w1) for row in raw]
        initial = [(row.n, row.w1_initial) for row in raw]
        summary = per_n_rows("sup_dev_x", dev) + per_n_rows("sup_w1", sup_w1) + per_n_rows("w1_initial", initial)
        summary += quantile_rows("sup_dev_x", dev)
        if kernel_form:
            summary += slope_rows("sup_dev_x", dev, SHARP_BAND, asserted=self._assert_rates)
        else:
            # outside the kernel form only the slow n^-1/d rate is expected
            summary += slope_rows("sup_dev_x", dev, rate_band(-1.0 / d), asserted=False, min_r2=None)
        asserted = self._assert_rates and all_exact and d == W1_DIMENSION
        w1_band = W1_BAND if d == W1_DIMENSION else rate_band(-1.0 / max(d, 2))
        summary += slope_rows("w1_initial", initial, w1_band, asserted=asserted, min_r2=None)
        summary += slope_rows("sup_w1", sup_w1, w1_band, asserted=False, min_r2=None)
        summary.append(reference_bias_row(cfg.n_ref))
        return summary
