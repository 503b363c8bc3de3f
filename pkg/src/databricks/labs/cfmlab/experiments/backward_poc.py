"""Backward propagation of chaos: online gradient descent driven by ``n``-particle contexts against
the same trainer driven by ``n_ref``-particle contexts, with shared tokens and targets.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from databricks.labs.cfmlab.core.params import ParameterPath
from databricks.labs.cfmlab.core.rng import Stream
from databricks.labs.cfmlab.errors import UnsupportedFamilyError
from databricks.labs.cfmlab.experiments.base import (
    ExperimentBase,
    SummaryRow,
    banded,
    per_n_rows,
    reference_bias_row,
    slope_rows,
)
from databricks.labs.cfmlab.train import (
    OgdConfig,
    estimate_gradient_bound,
    resolve_ridge,
    run_paired_ogd,
    token_stream,
)

logger = logging.getLogger(__name__)

SHARP_BAND = (-0.65, -0.35)
MAX_UNIFORMITY_RATIO = 1.5
MIN_UNIFORM_FRACTION = 14 / 16


@dataclass
class BackwardPocRow:
    n: int
    repeat: int
    k: int
    deviation_linf: float
    grad_gap_linf: float
    loss_pop: float
    loss_emp: float
    theta_linf: float


def uniformity_ratio(series: np.ndarray, split_k: int) -> float:
    """Largest deviation over ``k >= split_k`` relative to the largest over ``k <= split_k``."""
    early = float(np.max(series[: split_k + 1]))
    late = float(np.max(series[split_k:]))
    if early == 0:
        return 1.0 if late == 0 else math.inf
    return late / early


class BackwardPoc(ExperimentBase[BackwardPocRow]):
    name = "poc-backward"
    raw_klass = BackwardPocRow

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._ogd: OgdConfig | None = None
        self._gradient_bound = 0.0

    @property
    def ogd(self) -> OgdConfig:
        if self._ogd is None:
            self._ogd = self._resolve_ogd(self._cfg.build_path())
        return self._ogd

    @property
    def gradient_bound(self) -> float:
        """Warm-up estimate of the gradient bound; a ridge above it is the large-ridge regime."""
        _ = self.ogd
        return self._gradient_bound

    def _resolve_ogd(self, theta0: ParameterPath) -> OgdConfig:
        cfg = self._cfg
        ogd = cfg.ogd_config
        rng = cfg.rng().child(Stream.BACKWARD_POC)
        self._gradient_bound = estimate_gradient_bound(theta0, cfg.population_spec, ogd, rng, cfg.context_size)
        return resolve_ridge(ogd, self._gradient_bound)

    def trials(self) -> list[BackwardPocRow]:
        theta0 = self._cfg.build_path()
        if not theta0.differentiable():
            msg = f"{self.name} needs a differentiable schedule, got {self._cfg.path_spec.schedule}"
            raise UnsupportedFamilyError(msg)
        ogd = self.ogd
        logger.info(f"[{self.name}] eta={ogd.eta} lambda={ogd.ridge:.6g} K={ogd.iterations}")
        tasks = []
        for repeat in range(self._cfg.repeats):
            for n in self._cfg.sizes:
                tasks.append(self._indexed(len(tasks), self._pair, theta0, ogd, n, repeat))
        rows: list[BackwardPocRow] = []
        for chunk in self._gather("paired trainers", tasks):
            rows.extend(chunk)
        return rows

    def _pair(self, theta0: ParameterPath, ogd: OgdConfig, n: int, repeat: int) -> list[BackwardPocRow]:
        cfg = self._cfg
        rng = cfg.rng().child(Stream.BACKWARD_POC, repeat)
        pairs = token_stream(cfg.population_spec, ogd.iterations, rng.child(Stream.TOKEN), ogd)
        log = run_paired_ogd(
            theta0,
            cfg.population_spec,
            pairs,
            n,
            cfg.n_ref,
            ogd,
            rng.child(Stream.CONTEXT, n),
            coupled=cfg.coupled,
        )
        return [
            BackwardPocRow(
                n,
                repeat,
                record.k,
                record.deviation_linf,
                record.grad_gap_linf,
                record.loss_pop,
                record.loss_emp,
                record.theta_linf,
            )
            for record in log.paired
        ]

    def summarize(self, raw: list[BackwardPocRow]) -> list[SummaryRow]:
        cfg = self._cfg
        ogd = self.ogd
        series: dict[tuple[int, int], list[float]] = {}
        for row in raw:
            series.setdefault((row.n, row.repeat), []).append(row.deviation_linf)
        summary = [
            SummaryRow("ridge", value=ogd.ridge, note=cfg.ogd_config.ridge_mode),
            SummaryRow("gradient_bound", value=self.gradient_bound, note="warm-up"),
        ]
        sup_points = []
        horizon = math.ceil(1.0 / ogd.eta)
        horizon_points = []
        ratios: dict[int, list[float]] = {}
        for (n, repeat), values in sorted(series.items()):
            deviations = np.array(values)
            sup_points.append((n, float(deviations.max())))
            summary.append(SummaryRow("sup_deviation", n=n, repeat=repeat, value=float(deviations.max())))
            if horizon < len(deviations):
                horizon_points.append((n, float(deviations[horizon])))
            if ogd.iterations > cfg.split_k:
                ratio = uniformity_ratio(deviations, cfg.split_k)
                ratios.setdefault(n, []).append(ratio)
                summary.append(SummaryRow("uniformity_ratio", n=n, repeat=repeat, value=ratio))
        summary += per_n_rows("sup_deviation", sup_points)
        summary += [
            SummaryRow(row.metric, n=row.n, value=row.value, stderr=row.stderr, note=f"k={horizon}")
            for row in per_n_rows("horizon_deviation", horizon_points)
        ]
        large_ridge = ogd.ridge > self.gradient_bound
        for n, values in sorted(ratios.items()):
            fraction = sum(r <= MAX_UNIFORMITY_RATIO for r in values) / len(values)
            asserted = self._assert_rates and large_ridge
            summary.append(banded("uniform_fraction", fraction, MIN_UNIFORM_FRACTION, 1.0, asserted=asserted, n=n))
        summary += slope_rows("sup_deviation", sup_points, SHARP_BAND, asserted=self._assert_rates, min_r2=None)
        summary.append(reference_bias_row(cfg.n_ref))
        return summary
