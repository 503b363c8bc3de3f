import pytest

from databricks.labs.cfmlab.cli import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, run_cli


def _error_line(capsys) -> str:
    lines = capsys.readouterr().err.strip().splitlines()
    return lines[-1]


def test_zero_parameters_leave_the_token_in_place(config_file, tmp_path):
    path = config_file(experiment="forward", token=[0.25, -1.5, 0.5], path={"init_scale": 0.0})
    code = run_cli(["forward", "--config", str(path), "--out", str(tmp_path), "--threads", "1"])
    assert code == EXIT_OK
    summary = (tmp_path / "forward" / "forward.summary.csv").read_text(encoding="utf-8").splitlines()
    values = {line.split(",")[0]: line.split(",")[3] for line in summary[1:]}
    assert [values[f"x1[{i}]"] for i in range(3)] == ["0.25", "-1.5", "0.5"]


def test_missing_config_file(tmp_path, capsys):
    missing = tmp_path / "nowhere.yml"
    assert run_cli(["forward", "--config", str(missing), "--out", str(tmp_path)]) == EXIT_CONFIG
    line = _error_line(capsys)
    assert line.startswith("cfmlab: error=config code=1 message=")
    assert str(missing) in line


@pytest.mark.parametrize("argv", [[], ["train"], ["forward", "--threads"]])
def test_usage_errors(argv, capsys):
    assert run_cli(argv) == EXIT_CONFIG
    assert _error_line(capsys).startswith("cfmlab: error=config code=1")


@pytest.mark.parametrize("flag,value", [("--seed", "abc"), ("--threads", "x")])
def test_non_integer_flags_are_config_errors(flag, value, tmp_path, capsys):
    assert run_cli(["forward", flag, value, "--out", str(tmp_path)]) == EXIT_CONFIG
    line = _error_line(capsys)
    assert line.startswith("cfmlab: error=config code=1")
    assert f"{flag} must be an integer" in line


def test_unknown_config_key(config_file, tmp_path, capsys):
    path = config_file(experiment="forward", substeps=4)
    assert run_cli(["forward", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "unknown config key: substeps" in _error_line(capsys)


def test_diverging_flow_is_numerical(config_file, tmp_path, capsys):
    path = config_file(
        experiment="forward", token=[0.5, 0.5, 0.5], path={"schedule": ["attention"] * 4, "init_scale": 1e6}
    )
    code = run_cli(["forward", "--config", str(path), "--out", str(tmp_path), "--threads", "1"])
    assert code == EXIT_NUMERICAL
    assert "non-finite forward state" in _error_line(capsys)


def test_failed_criteria_are_acceptance_errors(config_file, tmp_path, capsys):
    path = config_file(
        experiment="grad-check",
        n_list=[1],
        layers_list=[1],
        families=["mlp"],
        instances=1,
        directions=4,
        path={"init_scale": 1.0},
        integrator={"scheme": "rk4", "substeps_per_layer": 1},
    )
    code = run_cli(["grad-check", "--config", str(path), "--out", str(tmp_path), "--threads", "1"])
    assert code == EXIT_ACCEPTANCE
    line = _error_line(capsys)
    assert line.startswith("cfmlab: error=acceptance code=3")
    assert "max_rel_error" in line
