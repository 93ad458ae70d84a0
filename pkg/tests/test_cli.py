import json
from pathlib import Path

import numpy as np
import pytest

import main as cli
from config import Config
from numerics.linalg import LinalgError
from pipeline import EXIT_ACCEPTANCE, EXIT_OK, EXIT_SOLVER, EXIT_VALIDATION, InversionPipeline, run_verification
from problems import poisson
from stages import ExperimentRunner, StageError
from utils import MANIFEST_NAME, file_sha256, read_field, read_manifest

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL_POISSON = """\
problem: poisson
name: small_poisson
mesh:
  nx: 6
  ny: 6
observations:
  count: 8
  window: [0.1, 0.1, 0.9, 0.5]
  noise_std: 0.01
newton:
  max_iter: 30
ghep:
  r: 5
  l: 5
variance:
  rank: 10
"""

SMALL_ADVDIFF = """\
problem: advdiff
name: small_advdiff
mesh:
  nx: 6
  ny: 6
  holes:
    - [0.3333333333333333, 0.3333333333333333, 0.6666666666666666, 0.6666666666666666]
observations:
  count: 6
  noise_variance: 1.0e-4
  t_start: 0.5
  t_step: 0.25
advdiff:
  kappa: 0.01
  t_final: 1.0
  num_steps: 8
  windows:
    - [0.0, 1.0]
    - [0.5, 1.0]
ghep:
  r: 5
  l: 5
variance:
  rank: 10
"""


@pytest.fixture(autouse=True)
def output_root(monkeypatch, tmp_path):
    monkeypatch.setattr(Config, "OUTPUT_ROOT", str(tmp_path / "outputs"))


@pytest.fixture
def small_config(tmp_path):
    def write(text, name="run.yaml"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)

    return write


class TestVerify:
    def test_passes(self, capsys):
        assert cli.main(["verify"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "verification report: poisson" in out
        assert "verification report: advdiff" in out
        assert "[randeig] operator apply counts" in out
        assert "[fem] P2 partition of unity" in out

    def test_injected_adjoint_bug_fails(self):
        assert cli.main(["verify", "--inject-adjoint-bug"]) != EXIT_OK

    def test_result_shape(self):
        result = run_verification(nx=4)
        assert result["success"]
        assert [r.name for r in result["result"]["reports"]] == ["poisson", "advdiff"]
        assert {c.suite for c in result["result"]["checks"]} == {"linalg", "randeig", "fem"}
        assert all(c.passed for c in result["result"]["checks"])

    def test_failing_property_check_fails_verify(self, monkeypatch, capsys):
        monkeypatch.setattr("numerics.checks.dense_qr", lambda Y: (np.linalg.qr(Y)[0], np.zeros((Y.shape[1], Y.shape[1]))))
        assert cli.main(["verify"]) != EXIT_OK
        assert "qr recomposition" in capsys.readouterr().out


class TestValidation:
    def test_dry_run(self, capsys):
        assert cli.main(["run", str(CONFIGS / "poisson_desk.yaml"), "--dry-run"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PLAN" in out
        assert '"problem": "poisson"' in out

    def test_missing_config(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "absent.yaml")]) == EXIT_VALIDATION

    def test_invalid_config(self, small_config):
        path = small_config("problem: poisson\nmesh:\n  nz: 3\n")
        assert cli.main(["run", path]) == EXIT_VALIDATION

    def test_plan_reports_line(self, small_config):
        result = InversionPipeline(small_config("problem: poisson\nmesh:\n  nz: 3\n")).plan()
        assert not result["success"]
        assert result["error"].startswith("line 3:")

    def test_spectrum_needs_windows(self):
        assert cli.main(["spectrum", str(CONFIGS / "advdiff_desk.yaml")]) == EXIT_VALIDATION

    def test_spectrum_needs_advdiff(self):
        assert cli.main(["spectrum", str(CONFIGS / "poisson_desk.yaml"), "--windows", "1,4"]) == EXIT_VALIDATION

    def test_bad_window_syntax(self):
        with pytest.raises(SystemExit):
            cli.main(["spectrum", str(CONFIGS / "advdiff_desk.yaml"), "--windows", "4,1"])

    def test_unknown_stage(self, small_config):
        assert cli.main(["run", small_config(SMALL_POISSON), "--stage", "calibrate"]) == EXIT_VALIDATION

    def test_bad_environment(self, monkeypatch):
        monkeypatch.setattr(Config, "THREADS", 0)
        assert cli.main(["verify"]) == EXIT_VALIDATION


class TestRuns:
    def test_poisson_end_to_end(self, small_config, tmp_path):
        out = tmp_path / "poisson_out"
        assert cli.main(["run", small_config(SMALL_POISSON), "--output", str(out)]) == EXIT_OK
        complete, entries = read_manifest(out)
        assert complete
        assert len(entries) >= 8
        for name in ("m_map.txt", "newton_trace.csv", "eigenvalues.csv", "posterior_variance.txt", "summary.json"):
            assert name in entries
            assert entries[name] == file_sha256(out / name)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["complete"]
        assert summary["stages"]["map"]["converged"]
        assert summary["stages"]["eigens"]["kept"] <= summary["stages"]["eigens"]["num_observations"]
        assert summary["stages"]["variance"]["fraction_reduced"] == 1.0

    def test_seeded_runs_are_identical(self, small_config, tmp_path):
        path = small_config(SMALL_POISSON)
        first, second = tmp_path / "a", tmp_path / "b"
        assert cli.main(["run", path, "--output", str(first)]) == EXIT_OK
        assert cli.main(["run", path, "--output", str(second)]) == EXIT_OK
        for name in ("m_map.txt", "posterior_sample_0.txt", "prior_variance.txt"):
            assert file_sha256(first / name) == file_sha256(second / name)

    def test_single_stage_runs_its_dependencies(self, small_config, tmp_path):
        out = tmp_path / "stage_out"
        assert cli.main(["run", small_config(SMALL_POISSON), "--stage", "variance", "--output", str(out)]) == EXIT_OK
        complete, entries = read_manifest(out)
        assert complete
        for name in ("m_map.txt", "eigenvalues.csv", "prior_variance.txt", "posterior_variance.txt"):
            assert name in entries
        assert "prior_sample_0.txt" not in entries
        prior_var = read_field(out / "prior_variance.txt")[1][:, 0]
        post_var = read_field(out / "posterior_variance.txt")[1][:, 0]
        assert np.all(post_var <= prior_var)
        assert post_var.sum() < prior_var.sum()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["stages"]["variance"]["mean_reduction_inside"] > 0.0

    def test_variance_without_eigens_is_rejected(self, small_config):
        text = SMALL_POISSON + "stages:\n  eigens: false\n"
        assert cli.main(["run", small_config(text)]) == EXIT_VALIDATION

    def test_runner_refuses_posterior_without_eigenpairs(self, small_config, tmp_path):
        cfg = InversionPipeline(small_config(SMALL_POISSON)).load()
        stages = cfg.stages.model_copy(update={"sample_prior": False, "map": False, "eigens": False, "sample_posterior": False})
        cfg = cfg.model_copy(update={"stages": stages})
        runner = ExperimentRunner(poisson.build_problem(cfg), cfg, str(tmp_path / "no_eigens"))
        with pytest.raises(StageError) as err:
            runner.run()
        assert err.value.stage == "variance"
        assert "eigens" in str(err.value)
        complete, entries = read_manifest(tmp_path / "no_eigens")
        assert not complete
        assert "posterior_variance.txt" not in entries

    def test_mesh_error_is_a_validation_failure(self, small_config, tmp_path):
        path = small_config(SMALL_ADVDIFF.replace("nx: 6", "nx: 5"))
        out = str(tmp_path / "bad_mesh")
        assert cli.main(["run", path, "--stage", "sample_prior", "--output", out]) == EXIT_VALIDATION
        assert cli.main(["spectrum", path, "--windows", "0,1", "--output", out]) == EXIT_VALIDATION

    def test_failing_stage_leaves_incomplete_manifest(self, small_config, tmp_path, monkeypatch):
        def broken(*args, **kwargs):
            raise LinalgError("factorization failed")

        monkeypatch.setattr("inference.newtoncg.solve", broken)
        out = tmp_path / "broken"
        assert cli.main(["run", small_config(SMALL_POISSON), "--output", str(out)]) == EXIT_SOLVER
        complete, entries = read_manifest(out)
        assert not complete
        assert "prior_sample_0.txt" in entries
        assert "m_map.txt" not in entries

    def test_unconverged_map_is_an_acceptance_failure(self, small_config, tmp_path):
        text = SMALL_POISSON.replace("max_iter: 30", "max_iter: 1")
        out = tmp_path / "short"
        assert cli.main(["run", small_config(text), "--output", str(out)]) == EXIT_ACCEPTANCE
        assert (out / MANIFEST_NAME).exists()

    def test_advdiff_end_to_end_with_spectra(self, small_config, tmp_path):
        out = tmp_path / "advdiff_out"
        assert cli.main(["run", small_config(SMALL_ADVDIFF), "--output", str(out)]) == EXIT_OK
        complete, entries = read_manifest(out)
        assert complete
        assert "spectrum_0_1.csv" in entries
        assert "spectrum_0.5_1.csv" in entries

    def test_spectrum_command(self, small_config, tmp_path):
        out = tmp_path / "spectra"
        path = small_config(SMALL_ADVDIFF)
        assert cli.main(["spectrum", path, "--windows", "0,1", "0.75,1", "--output", str(out)]) == EXIT_OK
        lines = (out / "spectrum_0.75_1.csv").read_text().splitlines()
        assert lines[0] == "index,eigenvalue"
        assert len(lines) == 6
        assert cli.main(["spectrum", path, "--windows", "0.1,0.2", "--output", str(out)]) == EXIT_VALIDATION


def spectrum_values(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 1]


def assert_ordered(smaller, larger):
    k = min(smaller.size, larger.size)
    assert k > 0
    assert np.all(smaller[:k] <= larger[:k] * (1.0 + 1e-8))


@pytest.mark.slow
class TestDeskRuns:
    def test_poisson_desk(self, tmp_path):
        result = InversionPipeline(str(CONFIGS / "poisson_desk.yaml"), str(tmp_path / "poisson")).run_workflow()
        assert result["exit_code"] == EXIT_OK, result.get("error")
        stages = result["result"]["stages"]
        assert stages["eigens"]["above_one"] < 50
        assert stages["variance"]["mean_reduction_inside"] >= 2.0 * stages["variance"]["mean_reduction_outside"]

    def test_advdiff_desk(self, tmp_path):
        result = InversionPipeline(str(CONFIGS / "advdiff_desk.yaml"), str(tmp_path / "advdiff")).run_workflow()
        assert result["exit_code"] == EXIT_OK, result.get("error")
        stages = result["result"]["stages"]
        assert stages["variance"]["fraction_reduced"] >= 0.99
        wide, middle, short = (spectrum_values(tmp_path / "advdiff" / f"spectrum_{t0}_4.csv") for t0 in (1, 2, 3))
        assert_ordered(short, middle)
        assert_ordered(middle, wide)
