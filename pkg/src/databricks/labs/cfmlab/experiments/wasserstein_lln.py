"""Wasserstein law of large numbers: ``W1(μ̂₀, μ₀)`` of an ``n``-particle draw against a large
reference draw of the same population, without any flow.
"""

import logging
from dataclasses import dataclass

from databricks.labs.cfmlab.core.ensemble import Ensemble, sample_ensemble
from databricks.labs.cfmlab.core.rng import Stream
from databricks.labs.cfmlab.experiments.base import (
    ExperimentBase,
    SummaryRow,
    per_n_rows,
    quantile_rows,
    rate_band,
    reference_bias_row,
    slope_rows,
    w1,
)
from databricks.labs.cfmlab.experiments.forward_poc import W1_BAND, W1_DIMENSION

logger = logging.getLogger(__name__)


@dataclass
class WassersteinRow:
    n: int
    repeat: int
    w1: float
    method: str


class WassersteinLln(ExperimentBase[WassersteinRow]):
    name = "wasserstein-lln"
    raw_klass = WassersteinRow

    def trials(self) -> list[WassersteinRow]:
        tasks = [self._indexed(r, self._repeat, r) for r in range(self._cfg.repeats)]
        rows: list[WassersteinRow] = []
        for chunk in self._gather("empirical W1", tasks):
            rows.extend(chunk)
        return rows

    def _repeat(self, repeat: int) -> list[WassersteinRow]:
        cfg = self._cfg
        rng = cfg.rng().child(Stream.WASSERSTEIN_LLN, repeat)
        reference = sample_ensemble(cfg.population_spec, cfg.n_ref, rng.child(Stream.REFERENCE))
        rows = []
        for n in cfg.sizes:
            if cfg.coupled:
                empirical: Ensemble = reference.head(n)
            else:
                empirical = sample_ensemble(cfg.population_spec, n, rng.child(Stream.EMPIRICAL_CONTEXT, n))
            distance, method = w1(empirical, reference, cfg.projections, rng.child(Stream.PROJECTIONS, n))
            rows.append(WassersteinRow(n, repeat, distance, method))
        logger.debug(f"repeat {repeat}: W1 at n={cfg.sizes[-1]} is {rows[-1].w1:.6g}")
        return rows

    def summarize(self, raw: list[WassersteinRow]) -> list[SummaryRow]:
        d = self._cfg.dimension
        points = [(row.n, row.w1) for row in raw]
        all_exact = all(row.method == "exact" for row in raw)
        # d = 1 and d = 2 follow different rates and are reported only
        asserted = self._assert_rates and all_exact and d == W1_DIMENSION
        band = W1_BAND if d == W1_DIMENSION else rate_band(-1.0 / max(d, 2))
        summary = per_n_rows("w1", points) + quantile_rows("w1", points)
        summary += slope_rows("w1", points, band, asserted=asserted, min_r2=None)
        summary.append(reference_bias_row(self._cfg.n_ref))
        return summary
