"""Acceptance entry point: deterministic oracle suites for every module plus rate studies at
reduced scale, whose slopes are reported but not asserted."""

import dataclasses
import itertools
import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from databricks.labs.cfmlab.config import ExperimentConfig
from databricks.labs.cfmlab.core.ensemble import Ensemble, Sample
from databricks.labs.cfmlab.core.params import Family, LayerParams, ParameterPath, PathNorm, path_norm
from databricks.labs.cfmlab.core.rng import Stream
from databricks.labs.cfmlab.errors import BoundViolationError
from databricks.labs.cfmlab.experiments.backward_poc import BackwardPoc
from databricks.labs.cfmlab.experiments.base import (
    ExperimentBase,
    ExperimentResult,
    Status,
    SummaryRow,
)
from databricks.labs.cfmlab.experiments.forward_poc import ForwardPoc
from databricks.labs.cfmlab.experiments.grad_check import GradCheck
from databricks.labs.cfmlab.experiments.lipschitz_audit import LipschitzAudit
from databricks.labs.cfmlab.experiments.support_growth import SupportGrowth
from databricks.labs.cfmlab.experiments.wasserstein_lln import WassersteinLln
from databricks.labs.cfmlab.flow import IntegratorConfig, integrate_forward, output_token
from databricks.labs.cfmlab.metrics import w1_exact
from databricks.labs.cfmlab.train import OgdConfig, run_ogd

logger = logging.getLogger(__name__)

GRADIENT_DIMENSIONS = (2, 3, 5)
ORACLE_SUBSTEPS = 64
ORACLE_TOLERANCE = 1e-6
ORDER_LADDER = (4, 8, 16)
MIN_RK4_ORDER = 3.0
W1_INSTANCES = 200
W1_TOLERANCE = 1e-10
TRIANGLE_SLACK = 1e-9
DETERMINISM_THREADS = 8
DETERMINISM_FILES = ("raw.csv", "summary.csv", "meta.json")
RIDGE_DECAY_TOLERANCE = 1e-12


@dataclass
class CheckRow:
    suite: str
    check: str
    value: float
    limit: float
    status: str
    note: str = ""


def _check(suite: str, check: str, value: float, limit: float, ok: bool, note: str = "") -> CheckRow:
    return CheckRow(suite, check, value, limit, (Status.PASS if ok else Status.FAIL).value, note)


def _at_dimension(cfg: ExperimentConfig, d: int) -> ExperimentConfig:
    population = dataclasses.replace(cfg.population_spec, dimension=0)
    return cfg.replace(dimension=d, population=population, token=None, target=None)


def _from_result(suite: str, result: ExperimentResult, prefix: str = "") -> list[CheckRow]:
    rows = []
    for row in result.summary:
        limit = row.upper if row.upper is not None else math.nan
        rows.append(CheckRow(suite, f"{prefix}{row.metric}", row.value, limit, row.status, row.note))
    return rows


def permutation_w1(a: np.ndarray, b: np.ndarray) -> float:
    """Exhaustive W1 between equal-size uniform samples over all permutation couplings."""
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    n = a.shape[0]
    return min(float(cost[range(n), list(order)].mean()) for order in itertools.permutations(range(n)))


class Selftest(ExperimentBase[CheckRow]):
    name = "selftest"
    raw_klass = CheckRow

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._timings: dict[str, float] = {}

    @property
    def root(self) -> Path:
        return self._backend.root

    def suites(self) -> dict[str, Callable[[], list[CheckRow]]]:
        return {
            "flow": self.flow_oracle,
            "gradient": self.gradient,
            "train": self.ridge_decay,
            "audit": self.audit,
            "support": self.support,
            "w1": self.exact_w1,
            "determinism": self.determinism,
            "rates": self.rates,
        }

    def trials(self) -> list[CheckRow]:
        rows = []
        for suite, fn in self.suites().items():
            started = time.perf_counter()
            suite_rows = fn()
            self._timings[suite] = time.perf_counter() - started
            failed = sum(row.status == Status.FAIL.value for row in suite_rows)
            logger.info(f"[{self.name}] {suite}: {len(suite_rows)} checks, {failed} failed")
            rows.extend(suite_rows)
        return rows

    def summarize(self, raw: list[CheckRow]) -> list[SummaryRow]:
        summary = []
        for suite in self.suites():
            rows = [row for row in raw if row.suite == suite]
            failed = [row.check for row in rows if row.status == Status.FAIL.value]
            status = Status.FAIL if failed else Status.PASS
            note = ", ".join(sorted(set(failed)))
            summary.append(SummaryRow(suite, value=float(len(rows)), status=status.value, note=note))
        return summary

    def table(self, result: ExperimentResult) -> str:
        lines = [f"{'suite':<14}{'status':<8}{'checks':>8}{'seconds':>10}"]
        for row in result.summary:
            seconds = self._timings.get(row.metric, math.nan)
            lines.append(f"{row.metric:<14}{row.status:<8}{int(row.value):>8}{seconds:>10.2f}")
        return "\n".join(lines)

    def flow_oracle(self) -> list[CheckRow]:
        """Attention with ``Q = 0`` moves the context mean linearly, so ``x_1 = x_0 + (e^V - I) mean(μ_0)``."""
        cfg = self._cfg
        d = cfg.dimension
        generator = cfg.rng().child(Stream.SELFTEST, 0).generator()
        blocks = {"Q": np.zeros((d, d)), "K": generator.standard_normal((d, d)), "V": generator.standard_normal((d, d))}
        blocks["V"] /= np.linalg.norm(blocks["V"])
        theta = ParameterPath([LayerParams(Family.ATTENTION, blocks)])
        x0 = generator.standard_normal(d)
        mu0 = Ensemble(generator.standard_normal((cfg.context_size, d)))
        exact = x0 + (scipy.linalg.expm(blocks["V"]) - np.eye(d)) @ mu0.mean()

        def error(m: int) -> float:
            traj = integrate_forward(x0, mu0, theta, IntegratorConfig("rk4", m))
            return float(np.linalg.norm(output_token(traj) - exact))

        closed_form = error(ORACLE_SUBSTEPS)
        rows = [_check("flow", "closed_form_error", closed_form, ORACLE_TOLERANCE, closed_form <= ORACLE_TOLERANCE)]
        errors = [error(m) for m in ORDER_LADDER]
        for coarse, fine, m in zip(errors, errors[1:], ORDER_LADDER[1:]):
            order = math.log2(coarse / fine) if fine > 0 else math.inf
            rows.append(_check("flow", "rk4_order", order, MIN_RK4_ORDER, order >= MIN_RK4_ORDER, f"m={m}"))
        zero = ParameterPath.zeros([Family.ATTENTION, Family.MLP], d)
        moved = float(np.linalg.norm(output_token(integrate_forward(x0, mu0, zero, cfg.integration)) - x0))
        rows.append(_check("flow", "zero_velocity", moved, 0.0, moved == 0.0))
        return rows

    def gradient(self) -> list[CheckRow]:
        rows = []
        for d in GRADIENT_DIMENSIONS:
            cfg = _at_dimension(self._cfg, d).replace(experiment="grad-check", n_list=[1, 8, 64])
            check = GradCheck.for_output(cfg, self.root / f"d{d}", self._threads)
            rows.extend(_from_result("gradient", check.run(strict=False), f"d{d}:"))
        return rows

    def ridge_decay(self) -> list[CheckRow]:
        """With zero velocity and ``x_0 = y_0`` every gradient vanishes and only the ridge acts."""
        cfg = self._cfg
        d = cfg.dimension
        generator = cfg.rng().child(Stream.SELFTEST, 1).generator()
        layer = LayerParams.random(Family.MLP, d, generator, 1.0)
        layer = LayerParams(Family.MLP, {"W1": np.zeros((d, d)), "W2": layer["W2"], "b": layer["b"]})
        theta0 = ParameterPath([layer])
        x0 = generator.standard_normal(d)
        ogd = OgdConfig(eta=0.1, ridge=1.0, iterations=10, integrator=cfg.integration)
        stream = [Sample(x0, Ensemble(generator.standard_normal((4, d))), x0)] * ogd.iterations
        log = run_ogd(theta0, stream, ogd, cfg.rng().child(Stream.SELFTEST, 2))
        assert log.theta is not None
        expected = (1.0 - ogd.eta * ogd.ridge) ** ogd.iterations * path_norm(theta0, PathNorm.LINF)
        observed = path_norm(log.theta, PathNorm.LINF)
        error = abs(observed - expected) / expected
        return [_check("train", "ridge_decay", error, RIDGE_DECAY_TOLERANCE, error <= RIDGE_DECAY_TOLERANCE)]

    def audit(self) -> list[CheckRow]:
        cfg = self._cfg.replace(experiment="lipschitz-audit")
        audit = LipschitzAudit.for_output(cfg, self.root, self._threads)
        try:
            return _from_result("audit", audit.run(strict=False))
        except BoundViolationError as err:
            return [_check("audit", err.bound, err.observed, err.limit, False, err.witness)]

    def support(self) -> list[CheckRow]:
        cfg = self._cfg.replace(
            experiment="support-growth",
            path=dataclasses.replace(self._cfg.path_spec, schedule=[Family.ATTENTION.value] * 4),
        )
        growth = SupportGrowth.for_output(cfg, self.root, self._threads)
        try:
            return _from_result("support", growth.run(strict=False))
        except BoundViolationError as err:
            return [_check("support", err.bound, err.observed, err.limit, False, err.witness)]

    def exact_w1(self) -> list[CheckRow]:
        generator = self._cfg.rng().child(Stream.SELFTEST, 3).generator()
        worst_oracle = 0.0
        for i in range(W1_INSTANCES):
            n = 1 + i % 6
            a, b = generator.standard_normal((n, 2)), generator.standard_normal((n, 2))
            distance, _ = w1_exact(Ensemble(a), Ensemble(b))
            worst_oracle = max(worst_oracle, abs(distance - permutation_w1(a, b)))
        worst_symmetry = worst_triangle = worst_identity = 0.0
        for i in range(W1_INSTANCES):
            a, b, c = (Ensemble(generator.standard_normal((2 + (i + k) % 7, 2))) for k in range(3))
            ab, _ = w1_exact(a, b)
            ba, _ = w1_exact(b, a)
            ac, _ = w1_exact(a, c)
            cb, _ = w1_exact(c, b)
            same, _ = w1_exact(a, a.permuted(generator.permutation(a.n)))
            worst_symmetry = max(worst_symmetry, abs(ab - ba))
            worst_triangle = max(worst_triangle, ab - (ac + cb))
            worst_identity = max(worst_identity, abs(same))
        return [
            _check("w1", "permutation_oracle", worst_oracle, W1_TOLERANCE, worst_oracle <= W1_TOLERANCE),
            _check("w1", "symmetry", worst_symmetry, W1_TOLERANCE, worst_symmetry <= W1_TOLERANCE),
            _check("w1", "triangle", worst_triangle, TRIANGLE_SLACK, worst_triangle <= TRIANGLE_SLACK),
            _check("w1", "identity", worst_identity, W1_TOLERANCE, worst_identity <= W1_TOLERANCE),
        ]

    def determinism(self) -> list[CheckRow]:
        """Runs a reduced forward study twice on one thread and once on many; outputs must match bytewise."""
        cfg = self._cfg.replace(experiment="poc-forward")
        runs = {"first": 1, "second": 1, "threaded": DETERMINISM_THREADS}
        for label, threads in runs.items():
            ForwardPoc.for_output(cfg, self.root / "determinism" / label, threads, assert_rates=False).run(strict=False)
        rows = []
        for suffix in DETERMINISM_FILES:
            name = f"{ForwardPoc.name}.{suffix}"
            blobs = {label: (self.root / "determinism" / label / ForwardPoc.name / name).read_bytes() for label in runs}
            same_seed = blobs["first"] == blobs["second"]
            threads = blobs["first"] == blobs["threaded"]
            rows.append(_check("determinism", f"repeat:{name}", float(same_seed), 1.0, same_seed))
            rows.append(_check("determinism", f"threads:{name}", float(threads), 1.0, threads))
        return rows

    def rates(self) -> list[CheckRow]:
        rows = []
        studies: list[type[ExperimentBase]] = [WassersteinLln, ForwardPoc]
        if self._cfg.ogd is not None:
            studies.append(BackwardPoc)
        for study in studies:
            cfg = self._cfg.replace(experiment=study.name)
            result = study.for_output(cfg, self.root, self._threads, assert_rates=False).run(strict=False)
            rows.extend(_from_result("rates", result, f"{study.name}:"))
        return rows
