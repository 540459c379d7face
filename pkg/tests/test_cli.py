import csv
import json
from pathlib import Path

from vpctl.cli import EXIT_CHECK, EXIT_MISSING, EXIT_OK, EXIT_USAGE, RunReport, main
from vpctl.config import digest, load_config

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_poisson_test_writes_reports(tmp_path, capsys):
    code, out, _ = run(["poisson-test", "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    assert "=== PASS ===" in out
    doc = json.loads((tmp_path / "poisson-test_report.json").read_text())
    assert doc["passed"] and doc["config_digest"] == digest(load_config({}))
    rows = list(csv.DictReader(open(tmp_path / "poisson-test_checks.csv")))
    assert rows and set(rows[0]) == {"check", "pass", "measured", "tolerance"}


def test_runs_are_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(["poisson-test", "--out", str(a)], capsys)
    run(["poisson-test", "--out", str(b)], capsys)
    assert (a / "poisson-test_checks.csv").read_text() == (b / "poisson-test_checks.csv").read_text()


def test_malformed_config_exits_2_without_output(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("horizon: -1\n")
    out = tmp_path / "out"
    code, _, err = run(["poisson-test", "--config", str(bad), "--out", str(out)], capsys)
    assert code == EXIT_USAGE
    assert json.loads(err.strip().splitlines()[-1])["stage"] == "config"
    assert not out.exists()


def test_missing_config_file_exits_2(tmp_path, capsys):
    code, _, _ = run(["poisson-test", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)], capsys)
    assert code == EXIT_USAGE


def test_bad_tolerance_override_exits_2(tmp_path, capsys):
    assert run(["poisson-test", "--tol", "gap", "--out", str(tmp_path)], capsys)[0] == EXIT_USAGE
    assert run(["poisson-test", "--tol", "bogus=1", "--out", str(tmp_path)], capsys)[0] == EXIT_USAGE


def test_unknown_command_exits_2(capsys):
    assert run(["frobnicate"], capsys)[0] == EXIT_USAGE


def test_missing_reference_exits_3(tmp_path, capsys):
    code, _, err = run(["verify", "accelerate", "--config", str(SCENARIOS / "local_bounded.yaml"),
                        "--out", str(tmp_path)], capsys)
    assert code == EXIT_MISSING
    assert json.loads(err.strip().splitlines()[-1])["exit_code"] == EXIT_MISSING


def test_report_on_missing_directory_exits_3(tmp_path, capsys):
    assert run(["report", "--out", str(tmp_path / "absent")], capsys)[0] == EXIT_MISSING


def test_nonzero_target_data_is_a_config_error(tmp_path, capsys):
    cfg = tmp_path / "t.yaml"
    cfg.write_text("target_data: {kappa: 1.0e-3}\n")
    assert run(["control-run", "--config", str(cfg), "--out", str(tmp_path)], capsys)[0] == EXIT_USAGE


def test_verify_scaling(tmp_path, capsys):
    code, out, _ = run(["verify", "scaling", "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK, out


def test_gcc_certify_negative_patch_is_rejected(tmp_path, capsys):
    code, out, _ = run(["gcc-certify", "--config", str(SCENARIOS / "magnetic_negative_patch.yaml"),
                        "--out", str(tmp_path)], capsys)
    # the run succeeds because rejection is the expected outcome for this profile
    assert code == EXIT_OK, out
    cert = json.loads((tmp_path / "gcc_certificate.json").read_text())
    assert cert["pass"] is False and "not positive" in cert["reason"]


def test_crossing_bound_zero_field(tmp_path, capsys):
    code, out, _ = run(["verify", "crossing-bound", "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK, out


def test_trace_writes_csv(tmp_path, capsys):
    code, _, _ = run(["trace", "--count", "2", "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    files = sorted(tmp_path.glob("trace_[0-9]*.csv"))
    assert len(files) == 2
    header = files[0].read_text().splitlines()[0]
    assert header.startswith("t,")


def test_failed_check_maps_to_exit_1(tmp_path, capsys):
    rep = RunReport("demo", "0" * 64)
    rep.check("x", False, 2.0, 1.0)
    assert not rep.passed
    rep.write(tmp_path)
    assert json.loads((tmp_path / "demo_report.json").read_text())["passed"] is False
    assert EXIT_CHECK == 1


def test_report_renders_figures(tmp_path, capsys):
    run(["trace", "--count", "1", "--out", str(tmp_path)], capsys)
    code, out, _ = run(["report", "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK, out
    assert list(tmp_path.glob("*.png"))
