import logging
import sys

from databricks.labs.cfmlab.config import ExperimentConfig
from databricks.labs.cfmlab.errors import AcceptanceError
from databricks.labs.cfmlab.experiments.backward_poc import BackwardPoc
from databricks.labs.cfmlab.experiments.forward_poc import ForwardPoc
from databricks.labs.cfmlab.experiments.grad_check import GradCheck
from databricks.labs.cfmlab.experiments.lipschitz_audit import LipschitzAudit
from databricks.labs.cfmlab.experiments.selftest import Selftest
from databricks.labs.cfmlab.experiments.single_run import ForwardRun, OgdRun
from databricks.labs.cfmlab.experiments.stability import Stability
from databricks.labs.cfmlab.experiments.support_growth import SupportGrowth
from databricks.labs.cfmlab.experiments.wasserstein_lln import WassersteinLln
from databricks.labs.cfmlab.framework.tasks import RunContext, task, trigger

logger = logging.getLogger(__name__)


@task("forward")
def forward(cfg: ExperimentConfig, ctx: RunContext):
    """Integrates one token together with one sampled context through the configured parameter path and
    writes every grid state to `forward/forward.raw.csv`. For differentiable schedules the backward adjoint
    states against the target are written to `forward/forward.adjoint.csv`."""
    ForwardRun.for_output(cfg, ctx.output, ctx.threads).run()


@task("grad-check")
def grad_check(cfg: ExperimentConfig, ctx: RunContext):
    """Compares adjoint directional derivatives with central finite differences of the loss over every
    combination of schedule kind (attention, MLP, mixed), depth and context size, at `m` and `2m` substeps
    per layer. Reports the worst relative error and the observed convergence order per cell."""
    GradCheck.for_output(cfg, ctx.output, ctx.threads).run()


@task("ogd")
def ogd(cfg: ExperimentConfig, ctx: RunContext):
    """Trains the parameter path by online gradient descent on a stream of tokens, targets and freshly
    sampled contexts, logging the loss and the parameter and gradient norms of every iteration."""
    OgdRun.for_output(cfg, ctx.output, ctx.threads).run()


@task("poc-forward")
def poc_forward(cfg: ExperimentConfig, ctx: RunContext):
    """Integrates `n`-particle contexts against an `n_ref`-particle reference drawn from the same
    population, with shared parameters and token, and fits the decay rate of the token deviation and of
    the context W1 distance in `n`."""
    ForwardPoc.for_output(cfg, ctx.output, ctx.threads).run()


@task("poc-backward")
def poc_backward(cfg: ExperimentConfig, ctx: RunContext):
    """Runs paired OGD trainers, one on `n`-particle contexts and one on `n_ref`-particle contexts, over a
    shared token stream. Reports the parameter deviation series, its supremum over iterations, its decay
    rate in `n`, and the uniformity ratio between late and early iterations."""
    BackwardPoc.for_output(cfg, ctx.output, ctx.threads).run()


@task("stability")
def stability(cfg: ExperimentConfig, ctx: RunContext):
    """Perturbs the initial context, the token and the parameters on a geometric ladder of magnitudes and
    records the deviation of the flow and of the loss gradient relative to the size of the perturbation."""
    Stability.for_output(cfg, ctx.output, ctx.threads).run()


@task("lipschitz-audit")
def lipschitz_audit(cfg: ExperimentConfig, ctx: RunContext):
    """Evaluates derivative norms of the attention and MLP fields on random draws inside the parameter and
    spatial balls, checks each against its closed-form bound, and writes the measured constants to
    `lipschitz-audit/lipschitz-audit.ledger.json`. Any violation fails the run."""
    LipschitzAudit.for_output(cfg, ctx.output, ctx.threads).run()


@task("support-growth")
def support_growth(cfg: ExperimentConfig, ctx: RunContext):
    """Tracks the largest context particle norm along random attention flows against `e^M R`."""
    SupportGrowth.for_output(cfg, ctx.output, ctx.threads).run()


@task("wasserstein-lln")
def wasserstein_lln(cfg: ExperimentConfig, ctx: RunContext):
    """Measures the exact W1 distance between `n`-particle draws and a large reference draw of the
    population and fits its decay rate in `n`."""
    WassersteinLln.for_output(cfg, ctx.output, ctx.threads).run()


@task("selftest")
def selftest(cfg: ExperimentConfig, ctx: RunContext):
    """Runs the acceptance suites: flow oracle, gradient checks, ridge decay, bound audit, support growth,
    exact W1 oracle and determinism, then the rate studies at reduced scale. Prints a pass/fail table with
    wall times and fails when any asserted check fails."""
    suite = Selftest.for_output(cfg, ctx.output, ctx.threads)
    result = suite.run(strict=False)
    print(suite.table(result))
    if result.failed:
        raise AcceptanceError(result.failed)


def main(*argv):
    if len(argv) == 0:
        argv = tuple(sys.argv[1:])
    trigger(*argv)
