import numpy as np
import pytest

from numerics import checks


def by_name(results):
    return {(c.suite, c.name): c for c in results}


class TestSuites:
    def test_linalg_suite_passes(self):
        results = checks.linalg_checks()
        assert {c.name for c in results} == {"cg vs dense solve", "cholesky recomposition", "qr recomposition", "eigh recomposition"}
        assert all(c.passed for c in results), [c.to_text() for c in results]

    def test_randeig_suite_passes(self):
        results = by_name(checks.randeig_checks())
        assert results[("randeig", "operator apply counts")].value == 0.0
        assert results[("randeig", "B-orthonormal eigenvectors")].passed
        assert results[("randeig", "double pass vs dense oracle")].passed

    def test_fem_suite_passes(self):
        results = by_name(checks.fem_checks(nx=4))
        for degree in (1, 2):
            assert results[("fem", f"P{degree} partition of unity")].passed
            assert results[("fem", f"P{degree} mass integrates the unit area")].passed
        assert results[("fem", "deterministic mesh and dof numbering")].value == 0.0
        assert results[("fem", "rectangular factor of the elliptic form")].passed


class TestFailures:
    def test_broken_kernel_is_reported(self, monkeypatch):
        monkeypatch.setattr("numerics.checks.dense_cholesky", lambda A: 1.01 * np.linalg.cholesky(A))
        results = by_name(checks.linalg_checks())
        assert not results[("linalg", "cholesky recomposition")].passed
        assert "FAIL" in results[("linalg", "cholesky recomposition")].to_text()

    def test_wrong_apply_count_is_reported(self, monkeypatch):
        real = checks.single_pass

        def extra_apply(A, B_apply, B_solve, cfg, Omega=None):
            result = real(A, B_apply, B_solve, cfg, Omega)
            result.counters["A_applies"] += 1
            return result

        monkeypatch.setattr("numerics.checks.single_pass", extra_apply)
        check = by_name(checks.randeig_checks())[("randeig", "operator apply counts")]
        assert check.value == 1.0
        assert "single_pass.A_applies" in check.detail

    def test_raising_suite_becomes_failed_check(self, monkeypatch):
        def broken(nx=8, seed=0):
            raise checks.fem.MeshError("no cells left")

        monkeypatch.setattr(checks, "SUITES", [checks.linalg_checks, broken])
        results = checks.run_property_checks(nx=4)
        failed = [c for c in results if not c.passed]
        assert len(failed) == 1
        assert failed[0].name == "suite raised"
        assert failed[0].value == float("inf")

    @pytest.mark.parametrize("value, passed", [(0.0, True), (1e-13, True), (1e-11, False), (float("nan"), False)])
    def test_passed_flag(self, value, passed):
        assert checks.PropertyCheck(suite="s", name="n", value=value, tolerance=1e-12).passed is passed
