import dataclasses
import functools
import logging
import math
import platform
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, Generic, TypeVar

import numpy as np
import ot
import scipy
from databricks.labs.blueprint.parallel import ManyError, Threads

from databricks.labs.cfmlab.__about__ import __version__
from databricks.labs.cfmlab.config import ExperimentConfig
from databricks.labs.cfmlab.core.ensemble import Ensemble, uniform_ball
from databricks.labs.cfmlab.core.rng import RngHandle
from databricks.labs.cfmlab.errors import AcceptanceError, DegenerateRateError
from databricks.labs.cfmlab.framework.backend import CsvBackend, DataclassInstance
from databricks.labs.cfmlab.metrics import exact_w1_feasible, fit_rate, per_n_stats, w1_exact, w1_sliced

logger = logging.getLogger(__name__)

Raw = TypeVar("Raw", bound=DataclassInstance)
T = TypeVar("T")

RATE_BAND = 0.15
MIN_R_SQUARED = 0.9
QUANTILES = (0.5, 0.9, 0.99)


class Status(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    REPORT = "report"


@dataclass
class SummaryRow:
    metric: str
    n: int | None = None
    repeat: int | None = None
    value: float = math.nan
    stderr: float | None = None
    lower: float | None = None
    upper: float | None = None
    status: str = Status.REPORT.value
    note: str = ""

    @property
    def failed(self) -> bool:
        return self.status == Status.FAIL.value


def banded(metric: str, value: float, lower: float, upper: float, *, asserted: bool, **kwargs: Any) -> SummaryRow:
    """Summary row checking ``lower <= value <= upper``; reported only unless ``asserted``."""
    if not asserted:
        status = Status.REPORT
    elif lower <= value <= upper:
        status = Status.PASS
    else:
        status = Status.FAIL
    return SummaryRow(metric, value=value, lower=lower, upper=upper, status=status.value, **kwargs)


def per_n_rows(metric: str, points: Iterable[tuple[int, float]]) -> list[SummaryRow]:
    return [SummaryRow(f"{metric}.mean", n=s.n, value=s.mean, stderr=s.stderr) for s in per_n_stats(points)]


def quantile_rows(metric: str, points: Iterable[tuple[int, float]]) -> list[SummaryRow]:
    """Empirical deviation quantiles across repeats at each ``n``."""
    grouped: dict[int, list[float]] = {}
    for n, value in points:
        grouped.setdefault(n, []).append(value)
    rows = []
    for n in sorted(grouped):
        for q in QUANTILES:
            value = float(np.quantile(grouped[n], q))
            rows.append(SummaryRow(f"{metric}.q{q:g}", n=n, value=value))
    return rows


def rate_band(exponent: float) -> tuple[float, float]:
    return exponent - RATE_BAND, exponent + RATE_BAND


def slope_rows(
    metric: str,
    points: Sequence[tuple[int, float]],
    band: tuple[float, float],
    *,
    asserted: bool,
    min_r2: float | None = MIN_R_SQUARED,
) -> list[SummaryRow]:
    """Rate-fit rows checking the fitted slope against ``band``."""
    try:
        fit = fit_rate(points)
    except DegenerateRateError as err:
        logger.warning(f"{metric}: no rate fit: {err}")
        return [SummaryRow(f"{metric}.slope", note=f"degenerate: {err}")]
    lower, upper = band
    rows = [banded(f"{metric}.slope", fit.slope, lower, upper, asserted=asserted, stderr=fit.stderr)]
    if min_r2 is not None:
        rows.append(banded(f"{metric}.r_squared", fit.r_squared, min_r2, 1.0, asserted=asserted))
    else:
        rows.append(SummaryRow(f"{metric}.r_squared", value=fit.r_squared))
    rows.append(SummaryRow(f"{metric}.intercept", value=fit.intercept))
    return rows


def reference_bias_row(n_ref: int) -> SummaryRow:
    return SummaryRow("reference_bias", n=n_ref, value=n_ref**-0.5, note="finite reference proxy, order n_ref^-1/2")


def w1(a: Ensemble, b: Ensemble, projections: int, rng: RngHandle) -> tuple[float, str]:
    """Exact W1 when the cost matrix fits, sliced otherwise; the method is returned alongside."""
    if exact_w1_feasible(a.n, b.n):
        distance, _ = w1_exact(a, b)
        return distance, "exact"
    return w1_sliced(a, b, projections, rng), "sliced"


def token_and_target(cfg: ExperimentConfig, rng: RngHandle) -> tuple[np.ndarray, np.ndarray]:
    """Configured token and target, or a token drawn in the population ball with its rolled target."""
    population = cfg.population_spec
    if cfg.token is not None:
        token = np.asarray(cfg.token, dtype=np.float64)
    else:
        token = uniform_ball(rng.generator(), 1, cfg.dimension, population.radius)[0]
    target = np.asarray(cfg.target, dtype=np.float64) if cfg.target is not None else np.roll(token, 1)
    return token, target


@dataclass
class ExperimentResult:
    name: str
    summary: list[SummaryRow]

    @property
    def failed(self) -> list[str]:
        return [row.metric for row in self.summary if row.failed]


class ExperimentBase(ABC, Generic[Raw]):
    """One Monte Carlo study: fans trials out over threads and persists
    ``<name>.raw.csv``, ``<name>.summary.csv`` and ``<name>.meta.json`` under ``<output>/<name>``.

    Trials draw from their own split streams and are merged in index order, so outputs do
    not depend on the number of threads.
    """

    name: ClassVar[str]
    raw_klass: ClassVar[type]

    def __init__(self, cfg: ExperimentConfig, backend: CsvBackend, threads: int = 1, *, assert_rates: bool = True):
        self._cfg = cfg
        self._backend = backend
        self._threads = threads
        self._assert_rates = assert_rates

    @classmethod
    def for_output(cls, cfg: ExperimentConfig, output: Path, threads: int = 1, **kwargs: Any):
        return cls(cfg, CsvBackend(output / cls.name), threads, **kwargs)

    @property
    def cfg(self) -> ExperimentConfig:
        return self._cfg

    @property
    def backend(self) -> CsvBackend:
        return self._backend

    @abstractmethod
    def trials(self) -> list[Raw]:
        raise NotImplementedError

    @abstractmethod
    def summarize(self, raw: list[Raw]) -> list[SummaryRow]:
        raise NotImplementedError

    def run(self, *, strict: bool = True) -> ExperimentResult:
        logger.info(f"[{self.name}] running with master seed {self._cfg.master_seed}")
        raw = self.trials()
        summary = self.summarize(raw)
        self._save(raw, summary)
        result = ExperimentResult(self.name, summary)
        if result.failed:
            logger.warning(f"[{self.name}] failed criteria: {', '.join(result.failed)}")
            if strict:
                raise AcceptanceError(result.failed)
        return result

    def _gather(self, label: str, tasks: Sequence[Callable[[], tuple[int, T]]]) -> list[T]:
        """Runs indexed tasks on the worker pool and returns their payloads in index order."""
        results, errors = Threads.gather(f"{self.name}: {label}", list(tasks), self._threads)
        if len(errors) == 1:
            raise errors[0]
        if errors:
            raise ManyError(errors)
        return [payload for _, payload in sorted(results, key=lambda pair: pair[0])]

    @staticmethod
    def _indexed(index: int, fn: Callable[..., T], *args: Any) -> Callable[[], tuple[int, T]]:
        return functools.partial(_call_indexed, index, fn, *args)

    def _save(self, raw: list[Raw], summary: list[SummaryRow]):
        self._backend.save_table(f"{self.name}.raw.csv", raw, self.raw_klass)
        self._backend.save_table(f"{self.name}.summary.csv", summary, SummaryRow)
        self._backend.save_json(f"{self.name}.meta.json", self.meta())
        logger.info(f"[{self.name}] wrote {len(raw)} raw rows and {len(summary)} summary rows to {self._backend.root}")

    def meta(self) -> dict[str, Any]:
        return {
            "experiment": self.name,
            "config": dataclasses.asdict(self._cfg),
            "master_seed": self._cfg.master_seed,
            "build": {
                "cfmlab": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "pot": ot.__version__,
                "python": platform.python_version(),
            },
        }


def _call_indexed(index: int, fn: Callable[..., T], *args: Any) -> tuple[int, T]:
    return index, fn(*args)
