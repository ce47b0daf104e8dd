"""Tests for the invariant suite."""
import pytest

from src import verify
from src.errors import ContractError
from src.schemas import InvariantResult
from src.verify import INVARIANTS, format_table, run_invariants, tolerance

FAST = ["softmax_rows", "cumsum_total", "row_identity", "zero_sum_rows", "weight_matrix_rows", "affine_hull", "rope"]


class TestRunInvariants:
    """Tests for running and reporting invariants."""

    def test_fast_subset_passes(self):
        """The cheap invariants hold in double precision."""
        results = run_invariants(only=FAST)
        assert len(results) == len(FAST)
        assert all(r.passed for r in results), format_table(results)

    @pytest.mark.slow
    def test_scan_oracle_passes(self):
        """The scan agrees with the quadratic oracle over the grid."""
        assert all(r.passed for r in run_invariants(only=["scan_naive", "encoder"]))

    def test_row_invariants_hold_in_single_precision(self):
        """Single-precision rows are built in float32 and stay within the loosened tolerance."""
        results = run_invariants(precision="single", only=["row_identity", "zero_sum_rows"])
        assert len(results) == 2
        assert all(r.passed for r in results), format_table(results)

    def test_fault_is_caught(self):
        """Dropping the residual correction breaks the row invariants."""
        results = run_invariants(fault="skip_eps", only=["row_identity", "zero_sum_rows"])
        assert not any(r.passed for r in results)

    def test_fault_is_scoped(self):
        """The fault is cleared once the run returns."""
        run_invariants(fault="skip_eps", only=["zero_sum_rows"])
        assert run_invariants(only=["zero_sum_rows"])[0].passed

    def test_unknown_fault(self):
        """Only known faults can be injected."""
        with pytest.raises(ContractError):
            run_invariants(fault="flip_sign", only=[])

    def test_exceptions_become_failures(self, monkeypatch):
        """A check that raises is reported as failed, not propagated."""

        def boom(precision):
            raise ArithmeticError("overflow")

        monkeypatch.setattr(verify, "INVARIANTS", [("boom", boom)])
        [result] = run_invariants()
        assert not result.passed and "ArithmeticError" in result.detail

    def test_keys_unique(self):
        """Invariant keys are distinct."""
        keys = [key for key, _ in INVARIANTS]
        assert len(keys) == len(set(keys))


class TestReporting:
    """Tests for tolerances and the printed table."""

    def test_single_precision_loosens(self):
        """Single precision scales the listed tolerances."""
        assert tolerance("oracle", "single") == pytest.approx(tolerance("oracle", "double") * 1e4)
        assert tolerance("affine", "single") == tolerance("affine", "double")

    def test_table_summary(self):
        """The table ends with the pass count."""
        table = format_table(
            [InvariantResult(name="a", passed=True, detail="ok"), InvariantResult(name="b", passed=False, detail="bad")]
        )
        assert table.splitlines()[-1] == "1/2 invariants passed"
        assert "FAIL" in table
