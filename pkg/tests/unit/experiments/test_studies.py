import json
import math

import numpy as np
import pytest

from databricks.labs.cfmlab.config import PathSpec
from databricks.labs.cfmlab.core.params import ParameterPath, PathNorm, path_distance
from databricks.labs.cfmlab.core.rng import RngHandle
from databricks.labs.cfmlab.errors import UnsupportedFamilyError
from databricks.labs.cfmlab.experiments.backward_poc import BackwardPoc, uniformity_ratio
from databricks.labs.cfmlab.experiments.forward_poc import ForwardPoc
from databricks.labs.cfmlab.experiments.grad_check import Cell, GradCheck
from databricks.labs.cfmlab.experiments.lipschitz_audit import LipschitzAudit
from databricks.labs.cfmlab.experiments.single_run import ForwardRun, OgdRun
from databricks.labs.cfmlab.experiments.stability import Stability, perturb_one_layer
from databricks.labs.cfmlab.experiments.support_growth import SupportGrowth
from databricks.labs.cfmlab.experiments.wasserstein_lln import WassersteinLln
from databricks.labs.cfmlab.flow import IntegratorConfig
from databricks.labs.cfmlab.metrics import fit_rate
from databricks.labs.cfmlab.train import OgdConfig

from .conftest import small_config


def _metrics(result) -> dict[str, float]:
    return {row.metric: row.value for row in result.summary}


def test_forward_with_zero_parameters_keeps_the_token(tmp_path):
    cfg = small_config("forward", token=[0.1, -0.2, 0.3], path=PathSpec(init_scale=0.0))
    result = ForwardRun.for_output(cfg, tmp_path).run()
    metrics = _metrics(result)
    assert [metrics[f"x1[{i}]"] for i in range(3)] == [0.1, -0.2, 0.3]
    assert (tmp_path / "forward" / "forward.raw.csv").exists()
    assert (tmp_path / "forward" / "forward.adjoint.csv").exists()


def test_forward_skips_adjoint_for_nearest(tmp_path):
    cfg = small_config("forward", schedule=["nearest", "attention"])
    ForwardRun.for_output(cfg, tmp_path).run()
    assert (tmp_path / "forward" / "forward.raw.csv").exists()
    assert not (tmp_path / "forward" / "forward.adjoint.csv").exists()


def test_ogd_run_records_every_iteration(tmp_path):
    cfg = small_config("ogd", ogd=OgdConfig(eta=0.05, iterations=5))
    run = OgdRun.for_output(cfg, tmp_path)
    result = run.run()
    rows = run.backend.fetch("ogd.raw.csv")
    assert len(rows) == 6
    metrics = _metrics(result)
    assert metrics["ridge"] == 0.0
    assert metrics["loss.first"] >= 0


def test_wasserstein_lln_rows(tmp_path):
    cfg = small_config("wasserstein-lln")
    study = WassersteinLln.for_output(cfg, tmp_path, assert_rates=False)
    result = study.run()
    rows = study.backend.fetch("wasserstein-lln.raw.csv")
    assert len(rows) == 8 * 3
    assert {row["method"] for row in rows} == {"exact"}
    assert all(float(row["w1"]) > 0 for row in rows)
    assert "w1.slope" in _metrics(result)


def test_wasserstein_lln_is_thread_independent(tmp_path):
    cfg = small_config("wasserstein-lln")
    for label, threads in (("one", 1), ("four", 4)):
        WassersteinLln.for_output(cfg, tmp_path / label, threads, assert_rates=False).run()
    name = "wasserstein-lln/wasserstein-lln.raw.csv"
    assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "four" / name).read_bytes()


def test_forward_poc_coupled_reference_has_no_deviation(tmp_path):
    cfg = small_config("poc-forward", n_list=[4, 16, 128], coupled=True)
    study = ForwardPoc.for_output(cfg, tmp_path, assert_rates=False)
    study.run()
    rows = study.backend.fetch("poc-forward.raw.csv")
    assert len(rows) == 8 * 3
    at_reference = [row for row in rows if row["n"] == "128"]
    assert all(float(row["sup_dev_x"]) <= 1e-12 for row in at_reference)
    assert all(float(row["sup_w1"]) <= 1e-12 for row in at_reference)
    assert all(float(row["sup_dev_x"]) > 0.0 for row in rows if row["n"] == "4")


def test_forward_poc_summary_is_reported_only(tmp_path):
    cfg = small_config("poc-forward", schedule=["attention", "attention"])
    result = ForwardPoc.for_output(cfg, tmp_path, assert_rates=False).run()
    slope = next(row for row in result.summary if row.metric == "sup_dev_x.slope")
    assert slope.status == "report"
    assert any(row.metric == "reference_bias" for row in result.summary)


def test_grad_check_cells():
    cfg = small_config("grad-check", families=["attention", "mixed"], layers_list=[1, 2], n_list=[1, 4])
    cells = GradCheck(cfg, None).cells  # type: ignore[arg-type]
    assert len(cells) == 2 * 2 * 2
    assert Cell("mixed", 2, 4).schedule[1].value == "mlp"
    assert Cell("mlp", 1, 4).tolerance == 1e-5
    assert Cell("attention", 1, 1).tolerance == 1e-4
    assert Cell("attention", 1, 4).tolerance == 1e-3


def test_grad_check_errors_within_tolerance(tmp_path):
    cfg = small_config(
        "grad-check",
        families=["attention", "mlp"],
        layers_list=[1],
        n_list=[1, 4],
        instances=1,
        directions=2,
        integrator=IntegratorConfig("rk4", 8),
    )
    check = GradCheck.for_output(cfg, tmp_path)
    result = check.run(strict=False)
    assert len(check.backend.fetch("grad-check.raw.csv")) == 2 * 2 * 2
    errors = [row for row in result.summary if row.metric == "max_rel_error"]
    assert len(errors) == 4
    assert all(not row.failed for row in errors)


def test_grad_check_passes_strictly(tmp_path):
    cfg = small_config(
        "grad-check",
        families=["attention", "mlp"],
        layers_list=[1],
        n_list=[1, 4],
        instances=1,
        directions=2,
        integrator=IntegratorConfig("rk4", 8),
    )
    result = GradCheck.for_output(cfg, tmp_path).run()
    assert not result.failed
    assert {row.status for row in result.summary if row.metric == "max_rel_error"} == {"pass"}
    shrinks = [row for row in result.summary if row.metric == "shrink" and row.status != "report"]
    assert all(row.value >= 2.0 for row in shrinks)


def test_grad_check_rejects_nearest():
    cfg = small_config("grad-check", families=["nearest"])
    with pytest.raises(UnsupportedFamilyError):
        _ = GradCheck(cfg, None).cells  # type: ignore[arg-type]


def test_stability_ladder(tmp_path):
    study = Stability.for_output(small_config("stability"), tmp_path)
    result = study.run()
    rows = study.backend.fetch("stability.raw.csv")
    assert len(rows) == 2 * 3 * 3
    assert all(float(row["input_delta"]) > 0 for row in rows)
    assert all(math.isfinite(float(row["ratio"])) for row in rows)
    metrics = _metrics(result)
    assert {"context.max_ratio", "token.max_ratio", "theta.max_ratio"} <= set(metrics)
    statuses = {row.metric: row.status for row in result.summary if row.metric != "theta.rung_ratio"}
    assert statuses["flow_envelope.max_ratio"] == "pass"
    assert all(statuses[f"{kind}.gradient_envelope"] == "pass" for kind in ("context", "token", "theta"))
    rungs = [row for row in result.summary if row.metric == "theta.rung_ratio"]
    assert len(rungs) == 2
    assert all(row.status == "pass" for row in rungs)
    assert len(study.envelopes) == 50
    assert all(envelope.ratio <= 1.0 for envelope in study.envelopes)


def test_stability_needs_gradients(tmp_path):
    study = Stability.for_output(small_config("stability", schedule=["nearest"]), tmp_path)
    with pytest.raises(UnsupportedFamilyError):
        study.run()


def test_lipschitz_audit_holds(tmp_path):
    audit = LipschitzAudit.for_output(small_config("lipschitz-audit"), tmp_path)
    result = audit.run()
    assert not result.failed
    ledger = json.loads((tmp_path / "lipschitz-audit" / "lipschitz-audit.ledger.json").read_text())
    measured = {(c["family"], c["name"]) for c in ledger["measured"]}
    assert ("attention", "wasserstein_jac") in measured
    assert ("mlp", "jac_x") in measured
    assert all(c["samples"] == 40 for c in ledger["measured"])


def test_lipschitz_audit_rejects_nearest(tmp_path):
    audit = LipschitzAudit.for_output(small_config("lipschitz-audit", families=["nearest"]), tmp_path)
    with pytest.raises(UnsupportedFamilyError):
        audit.run()


def test_support_growth_stays_within_bound(tmp_path):
    cfg = small_config("support-growth", schedule=["attention"] * 4, substep_ladder=[4, 8])
    result = SupportGrowth.for_output(cfg, tmp_path).run()
    ratios = [row for row in result.summary if row.metric == "support.max_ratio"]
    assert len(ratios) == 2
    assert all(0 < row.value <= 1.0 for row in ratios)


def test_support_growth_is_attention_only(tmp_path):
    growth = SupportGrowth.for_output(small_config("support-growth"), tmp_path)
    with pytest.raises(UnsupportedFamilyError):
        growth.run()


def test_uniformity_ratio():
    assert uniformity_ratio(np.array([0.0, 1.0, 2.0, 1.5, 1.0]), 2) == 1.0
    assert uniformity_ratio(np.array([0.0, 1.0, 1.0, 3.0]), 1) == 3.0
    assert uniformity_ratio(np.zeros(4), 1) == 1.0
    assert uniformity_ratio(np.array([0.0, 0.0, 1.0]), 1) == math.inf


def test_backward_poc_series(tmp_path):
    cfg = small_config(
        "poc-backward",
        n_list=[2, 4, 8],
        n_ref=64,
        split_k=2,
        ogd=OgdConfig(eta=0.05, ridge=1.0, iterations=4),
    )
    study = BackwardPoc.for_output(cfg, tmp_path, assert_rates=False)
    result = study.run()
    rows = study.backend.fetch("poc-backward.raw.csv")
    assert len(rows) == 8 * 3 * 5
    assert all(float(row["deviation_linf"]) == 0.0 for row in rows if row["k"] == "0")
    metrics = [row.metric for row in result.summary]
    assert metrics[0] == "ridge"
    assert "uniformity_ratio" in metrics
    assert "sup_deviation.slope" in metrics


def test_summary_slope_is_recomputable_from_raw_rows(tmp_path):
    study = WassersteinLln.for_output(small_config("wasserstein-lln"), tmp_path, assert_rates=False)
    result = study.run()
    raw = study.backend.fetch("wasserstein-lln.raw.csv")
    refit = fit_rate([(int(row["n"]), float(row["w1"])) for row in raw])
    assert _metrics(result)["w1.slope"] == refit.slope


def test_backward_poc_coupled_contexts_do_not_deviate(tmp_path):
    cfg = small_config(
        "poc-backward",
        n_list=[2, 4, 16],
        n_ref=16,
        coupled=True,
        ogd=OgdConfig(eta=0.05, iterations=3),
    )
    study = BackwardPoc.for_output(cfg, tmp_path, assert_rates=False)
    study.run()
    rows = study.backend.fetch("poc-backward.raw.csv")
    assert all(float(row["deviation_linf"]) <= 1e-12 for row in rows if row["n"] == "16")


def test_zero_perturbation_gives_zero_output(tmp_path):
    study = Stability.for_output(small_config("stability", perturbation=0.0, rungs=2), tmp_path)
    study.run()
    rows = study.backend.fetch("stability.raw.csv")
    assert all(float(row["output_delta"]) <= 1e-12 for row in rows)
    assert all(float(row["ratio"]) == 0.0 for row in rows)


def test_zero_parameters_keep_the_support(tmp_path):
    cfg = small_config("support-growth", schedule=["attention"] * 2, bound_m=0.0)
    study = SupportGrowth.for_output(cfg, tmp_path)
    study.run()
    rows = study.backend.fetch("support-growth.raw.csv")
    for instance in ("0", "1"):
        norms = {row["max_particle_norm"] for row in rows if row["instance"] == instance}
        assert len(norms) == 1


@pytest.mark.parametrize("ridge,asserted", [(1e-6, False), (19.0, True)])
def test_backward_poc_asserts_uniformity_only_above_the_gradient_bound(tmp_path, ridge, asserted):
    cfg = small_config(
        "poc-backward",
        n_list=[2, 4, 8],
        n_ref=64,
        split_k=2,
        ogd=OgdConfig(eta=0.05, ridge=ridge, iterations=4),
    )
    study = BackwardPoc.for_output(cfg, tmp_path, assert_rates=True)
    result = study.run(strict=False)
    assert 1e-6 < study.gradient_bound < 19.0
    assert _metrics(result)["gradient_bound"] == study.gradient_bound
    fractions = [row for row in result.summary if row.metric == "uniform_fraction"]
    assert len(fractions) == 3
    assert all((row.status != "report") is asserted for row in fractions)


def test_lipschitz_audit_kernel_identity_is_absolute(tmp_path):
    audit = LipschitzAudit.for_output(small_config("lipschitz-audit", families=["attention"]), tmp_path)
    audit.run()
    rows = [row for row in audit.backend.fetch("lipschitz-audit.raw.csv") if row["bound"] == "kernel_identity"]
    assert len(rows) == 40
    assert all(float(row["limit"]) == 1e-12 for row in rows)
    assert all(float(row["observed"]) <= 1e-12 for row in rows)


def test_theta_perturbation_moves_one_seeded_layer():
    theta = ParameterPath.random(["attention", "mlp", "attention", "mlp"], 3, RngHandle(2), 0.5)
    moved, layer = perturb_one_layer(theta, 0.1, RngHandle(9))
    pairs = zip(moved.layers, theta.layers, strict=True)
    changed = [i for i, (a, b) in enumerate(pairs) if not np.array_equal(a.flatten(), b.flatten())]
    assert changed == [layer]
    assert path_distance(moved, theta) == pytest.approx(0.1)
    assert path_distance(moved, theta, PathNorm.L1) == pytest.approx(0.1 / 4)
    smaller, same = perturb_one_layer(theta, 0.05, RngHandle(9))
    assert same == layer
    assert path_distance(smaller, theta) == pytest.approx(0.05)
