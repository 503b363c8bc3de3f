"""Single forward pass and single OGD run, persisted with the same layout as the studies."""

import logging

import numpy as np

from databricks.labs.cfmlab.adjoint import backward_integrate, loss_eval, write_adjoint
from databricks.labs.cfmlab.core.ensemble import Sample, sample_ensemble
from databricks.labs.cfmlab.core.params import PathNorm, path_norm
from databricks.labs.cfmlab.core.rng import Stream
from databricks.labs.cfmlab.experiments.base import ExperimentBase, SummaryRow, token_and_target
from databricks.labs.cfmlab.flow import Trajectory, TrajectoryRow, integrate_forward, trajectory_rows
from databricks.labs.cfmlab.train import (
    OgdConfig,
    RidgeMode,
    TrainRecord,
    estimate_gradient_bound,
    resolve_ridge,
    run_ogd,
    token_stream,
)

logger = logging.getLogger(__name__)

# share of the final iterations averaged for the late loss
LATE_WINDOW = 0.1


class ForwardRun(ExperimentBase[TrajectoryRow]):
    """Integrates one token and one context; writes the trajectory and, for differentiable
    schedules, the adjoint states."""

    name = "forward"
    raw_klass = TrajectoryRow

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._trajectory: Trajectory | None = None
        self._target: np.ndarray | None = None

    def trials(self) -> list[TrajectoryRow]:
        cfg = self._cfg
        rng = cfg.rng().child(Stream.FORWARD)
        theta = cfg.build_path()
        x0, self._target = token_and_target(cfg, rng.child(Stream.TOKEN))
        mu0 = sample_ensemble(cfg.population_spec, cfg.context_size, rng.child(Stream.CONTEXT))
        self._trajectory = integrate_forward(x0, mu0, theta, cfg.integration)
        if theta.differentiable():
            adjoint = backward_integrate(self._trajectory, theta, self._target)
            write_adjoint(self._trajectory, adjoint, self._backend, f"{self.name}.adjoint.csv")
        return trajectory_rows(self._trajectory)

    def summarize(self, raw: list[TrajectoryRow]) -> list[SummaryRow]:
        assert self._trajectory is not None and self._target is not None
        x1 = self._trajectory.x_states[-1]
        summary = [SummaryRow(f"x1[{i}]", value=float(v)) for i, v in enumerate(x1)]
        summary.append(SummaryRow("loss", value=loss_eval(x1, self._target)))
        summary.append(SummaryRow("max_particle_norm", value=float(self._trajectory.max_particle_norms().max())))
        return summary


class OgdRun(ExperimentBase[TrainRecord]):
    """Online gradient descent on population contexts of ``context_size`` particles."""

    name = "ogd"
    raw_klass = TrainRecord

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._ogd: OgdConfig | None = None

    def trials(self) -> list[TrainRecord]:
        cfg = self._cfg
        rng = cfg.rng().child(Stream.OGD)
        theta0 = cfg.build_path()
        ogd = cfg.ogd_config
        if RidgeMode(ogd.ridge_mode) is RidgeMode.AUTO:
            bound = estimate_gradient_bound(theta0, cfg.population_spec, ogd, rng, cfg.context_size)
            ogd = resolve_ridge(ogd, bound)
        self._ogd = ogd
        pairs = token_stream(cfg.population_spec, ogd.iterations, rng.child(Stream.TOKEN), ogd)
        stream = [Sample(x0, cfg.population_spec, y0) for x0, y0 in pairs]
        log = run_ogd(theta0, stream, ogd, rng, context_size=cfg.context_size)
        if log.theta is not None:
            logger.info(f"[{self.name}] final |θ|∞={path_norm(log.theta, PathNorm.LINF):.6g}")
        return log.records

    def summarize(self, raw: list[TrainRecord]) -> list[SummaryRow]:
        assert self._ogd is not None
        losses = np.array([record.loss for record in raw[1:]])
        summary = [SummaryRow("ridge", value=self._ogd.ridge, note=self._cfg.ogd_config.ridge_mode)]
        if losses.size:
            late = losses[-max(1, int(LATE_WINDOW * losses.size)) :]
            summary.append(SummaryRow("loss.first", value=float(losses[0])))
            summary.append(SummaryRow("loss.late_mean", value=float(late.mean()), note=f"last {late.size} steps"))
            summary.append(SummaryRow("grad_linf.max", value=max(record.grad_linf for record in raw[1:])))
        summary.append(SummaryRow("theta_linf.final", value=raw[-1].theta_linf))
        return summary
