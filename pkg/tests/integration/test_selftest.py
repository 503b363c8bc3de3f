import json

from databricks.labs.cfmlab.cli import EXIT_OK, run_cli

SUITES = ("flow", "gradient", "train", "audit", "support", "w1", "determinism", "rates")


def test_bundled_selftest_passes(tmp_path, threads, capsys):
    code = run_cli(["selftest", "--out", str(tmp_path), "--threads", threads])

    out = capsys.readouterr().out
    assert code == EXIT_OK
    table = [line.split() for line in out.strip().splitlines()[-len(SUITES) :]]
    assert [row[0] for row in table] == list(SUITES)
    assert all(row[1] == "pass" for row in table)
    assert (tmp_path / "selftest" / "selftest.summary.csv").exists()


def test_bundled_bound_audit_holds(tmp_path, threads):
    code = run_cli(["lipschitz-audit", "--out", str(tmp_path), "--threads", threads])

    assert code == EXIT_OK
    ledger = json.loads((tmp_path / "lipschitz-audit" / "lipschitz-audit.ledger.json").read_text())
    assert ledger["samples"] == 10000
    limits = {(b["family"], b["name"]): b["value"] for b in ledger["theoretical"]}
    for constant in ledger["measured"]:
        assert constant["value"] <= limits[(constant["family"], constant["name"])] * (1 + 1e-8)
