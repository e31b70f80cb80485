import copy
import json

import numpy as np
import pandas as pd
import pytest

from periodic_portfolio.cli import (
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VERIFICATION,
    main,
)
from periodic_portfolio.engine.utility import ConstantLevel, UtilitySpec
from periodic_portfolio.exports import (
    A_STAR_FILE,
    POLICY_FILE,
    ROLLOUT_FILE,
    RUN_REPORT_FILE,
    SUMMARY_FILE,
    VALIDATION_FILE,
    VERIFY_FILE,
)

from .conftest import FLAT_LEVEL, RATE, flat_closed_form


def _run(command, config_path, out, *extra):
    return main([command, "--config", str(config_path), "--out", str(out), *extra])


def _verify_report(directory) -> dict:
    return json.loads((directory / VERIFY_FILE).read_text())


def _check(report: dict, name: str) -> dict:
    return next(check for check in report["checks"] if check["name"] == name)


@pytest.fixture
def flat_path(write_config, flat_config):
    return write_config(flat_config)


@pytest.fixture
def solved(tmp_path, flat_path):
    out = tmp_path / "solve"
    assert _run("solve", flat_path, out) == EXIT_OK
    return out


class TestValidate:
    def test_passes(self, tmp_path, flat_path, capsys):
        assert _run("validate", flat_path, tmp_path) == EXIT_OK
        records = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert records
        assert all(record["status"] != "fail" for record in records)
        assert json.loads((tmp_path / VALIDATION_FILE).read_text())["passed"]

    def test_small_rho_fails(self, tmp_path, write_config, flat_config, capsys):
        data = copy.deepcopy(flat_config)
        # zeta(alpha (1 - gamma)) = 0.005 on the flat market
        data["utility"]["rho"] = 0.004
        assert _run("validate", write_config(data), tmp_path) == EXIT_VERIFICATION
        records = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        failed = [r for r in records if r["status"] == "fail"]
        assert [r["name"] for r in failed] == ["rho > zeta(alpha(1-gamma)) v 0"]
        assert failed[0]["lhs"] == pytest.approx(0.004)
        assert failed[0]["rhs"] == pytest.approx(0.005)

    def test_invalid_config(self, tmp_path, write_config, flat_config):
        data = copy.deepcopy(flat_config)
        data["utility"]["gamma"] = 0.0
        assert _run("validate", write_config(data), tmp_path) == EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert _run("validate", tmp_path / "absent.json", tmp_path) == EXIT_CONFIG

    def test_unknown_command(self, flat_path):
        with pytest.raises(SystemExit):
            main(["optimize", "--config", str(flat_path)])


class TestSolve:
    def test_degenerate_market_matches_closed_form(self, solved):
        spec = UtilitySpec(0.5, 0.5, 0.2, 1.0, ConstantLevel(FLAT_LEVEL))
        frame = pd.read_csv(solved / A_STAR_FILE)
        assert list(frame.columns) == ["y", "A"]
        np.testing.assert_allclose(
            frame["A"], flat_closed_form(spec, RATE, FLAT_LEVEL), rtol=1e-8
        )
        policy = pd.read_csv(solved / POLICY_FILE)
        assert list(policy.columns) == ["y", "pi_1", "nu_1", "eta", "lambda"]
        np.testing.assert_allclose(policy["pi_1"], 0.0, atol=1e-12)

    def test_run_report(self, solved):
        report = json.loads((solved / RUN_REPORT_FILE).read_text())
        assert report["mode"] == "power"
        assert report["converged"]
        assert report["within_bounds"]
        assert report["C_star"] == 0.0
        assert report["policy"]["mode"] == "power_general"
        assert report["duality"]

    def test_rerun_is_byte_identical(self, tmp_path, flat_path, solved):
        again = tmp_path / "again"
        assert _run("solve", flat_path, again) == EXIT_OK
        for name in (A_STAR_FILE, POLICY_FILE, RUN_REPORT_FILE):
            assert (again / name).read_bytes() == (solved / name).read_bytes()

    def test_failing_assumption_is_numerical(self, tmp_path, write_config, flat_config):
        data = copy.deepcopy(flat_config)
        data["utility"]["rho"] = 0.004
        assert _run("solve", write_config(data), tmp_path) == EXIT_NUMERICAL
        assert not (tmp_path / A_STAR_FILE).exists()

    def test_iteration_cap_is_numerical(self, tmp_path, write_config, merton_config):
        data = copy.deepcopy(merton_config)
        data["numerics"]["max_iterations"] = 1
        assert _run("solve", write_config(data), tmp_path) == EXIT_NUMERICAL

    @pytest.mark.parametrize("gamma, C_star", [(1.0, 0.0), (0.5, 0.5 / (np.exp(0.2) - 1.0))])
    def test_log_utility(self, tmp_path, write_config, flat_config, gamma, C_star):
        data = copy.deepcopy(flat_config)
        data["utility"].update(mode="log", gamma=gamma)
        del data["utility"]["alpha"]
        assert _run("solve", write_config(data), tmp_path) == EXIT_OK
        report = json.loads((tmp_path / RUN_REPORT_FILE).read_text())
        assert report["C_star"] == pytest.approx(C_star)
        assert report["policy"]["mode"] == "log"
        policy = pd.read_csv(tmp_path / POLICY_FILE)
        np.testing.assert_array_equal(policy["lambda"], 1.0)


class TestSimulate:
    def test_writes_rollout(self, tmp_path, flat_path, solved, capsys):
        out = tmp_path / "simulate"
        code = _run("simulate", flat_path, out, "--artifacts", str(solved))
        assert code == EXIT_OK
        assert capsys.readouterr().out.startswith("objective:")
        frame = pd.read_csv(out / ROLLOUT_FILE)
        assert list(frame.columns) == ["path", "period", "y", "wealth", "ratio", "utility", "D"]
        # 256 paths over periods 0..2
        assert len(frame) == 256 * 3
        later = frame[frame["period"] > 0]
        np.testing.assert_allclose(later["ratio"], np.exp(RATE), rtol=1e-10)
        summary = json.loads((out / SUMMARY_FILE).read_text())
        assert summary["route"] == "dual"
        assert summary["periods"] == 2
        assert all(step["martingale"] for step in summary["increments"])

    def test_policy_route(self, tmp_path, flat_path, solved):
        out = tmp_path / "policy"
        code = _run(
            "simulate", flat_path, out, "--artifacts", str(solved), "--route", "policy"
        )
        assert code == EXIT_OK
        assert json.loads((out / SUMMARY_FILE).read_text())["route"] == "policy"

    def test_missing_artifacts(self, tmp_path, flat_path):
        assert _run("simulate", flat_path, tmp_path / "empty") == EXIT_CONFIG


class TestVerify:
    def test_optimal_artifacts_pass(self, flat_path, solved, capsys):
        assert _run("verify", flat_path, solved) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines and all(line.startswith("PASS: ") for line in lines)
        report = _verify_report(solved)
        assert report["passed"]
        assert report["policy_scale"] is None
        names = {check["name"] for check in report["checks"]}
        assert {
            "A* within theoretical bounds",
            "value estimate within value bounds",
            "D is a martingale",
            "budget identity per period",
            "weak duality on certified nodes",
        } <= names

    def test_tampered_fixed_point_fails(self, flat_path, solved, capsys):
        path = solved / A_STAR_FILE
        frame = pd.read_csv(path)
        frame["A"] *= 1.5
        frame.to_csv(path, index=False)
        assert _run("verify", flat_path, solved) == EXIT_VERIFICATION
        assert "FAIL: A* within theoretical bounds" in capsys.readouterr().out
        assert not _check(_verify_report(solved), "A* within theoretical bounds")["passed"]


class TestMertonWorkflow:
    @pytest.fixture
    def merton_solved(self, tmp_path, write_config, merton_config):
        path = write_config(merton_config, "merton.json")
        out = tmp_path / "merton"
        assert _run("solve", path, out) == EXIT_OK
        return path, out

    def test_closed_form_policy(self, merton_solved):
        _, out = merton_solved
        report = json.loads((out / RUN_REPORT_FILE).read_text())
        assert report["policy"]["mode"] == "power_gamma1"
        policy = pd.read_csv(out / POLICY_FILE)
        np.testing.assert_allclose(policy["pi_1"], 3.0)
        np.testing.assert_allclose(policy["nu_1"], 0.0)

    def test_riskfree_scaling_breaks_the_martingale(self, merton_solved, capsys):
        path, out = merton_solved
        code = _run("verify", path, out, "--policy-scale", "0.0")
        assert code == EXIT_VERIFICATION
        assert "FAIL: D is a martingale" in capsys.readouterr().out
        report = _verify_report(out)
        assert report["policy_scale"] == 0.0
        martingale = _check(report, "D is a martingale")
        assert not martingale["passed"]
        assert 1 in martingale["detail"]["strictly_negative"]

    def test_worker_count_does_not_change_results(self, tmp_path, write_config, merton_config, merton_solved):
        _, out = merton_solved
        data = copy.deepcopy(merton_config)
        data["numerics"]["workers"] = 3
        threaded = tmp_path / "threaded"
        assert _run("solve", write_config(data, "threaded.json"), threaded) == EXIT_OK
        for name in (A_STAR_FILE, POLICY_FILE):
            assert (threaded / name).read_bytes() == (out / name).read_bytes()
