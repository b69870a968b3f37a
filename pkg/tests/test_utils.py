"""Tests for the shared utilities: thread pools and the error hierarchy."""

import os
import sys
import threading

import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from utils import parallel
from utils.errors import (
    BoxTooSmall,
    CGNoConvergence,
    ConfigError,
    FitFailure,
    IncommensurateGrids,
    InvariantViolation,
    NoBinding,
    NoConvergence,
    NonNeutralSource,
    PolaronLabError,
)
from utils.parallel import THREADS_ENV, parallel_map, set_thread_override, thread_count


@pytest.fixture(autouse=True)
def reset_override():
    yield
    set_thread_override(None)


class TestThreadCount:
    """Test how the worker count is resolved."""

    def test_argument_wins(self, monkeypatch):
        """Test an explicit argument beats the override and the environment."""
        monkeypatch.setenv(THREADS_ENV, "3")
        set_thread_override(2)
        assert thread_count(5) == 5

    def test_override_then_environment(self, monkeypatch):
        """Test the CLI override beats the environment variable."""
        monkeypatch.setenv(THREADS_ENV, "3")
        assert thread_count() == 3
        set_thread_override(2)
        assert thread_count() == 2

    def test_bad_environment_value(self, monkeypatch):
        """Test a non-integer environment value falls back to the CPU count."""
        monkeypatch.setenv(THREADS_ENV, "many")
        assert thread_count() == (os.cpu_count() or 1)

    def test_invalid_override(self):
        """Test zero threads are refused."""
        with pytest.raises(ValueError):
            set_thread_override(0)


class TestParallelMap:
    """Test ordered parallel evaluation."""

    def test_order_is_preserved(self):
        """Test results come back in input order on several threads."""
        assert parallel_map(lambda x: x * x, list(range(20)), threads=4) == [x * x for x in range(20)]

    def test_single_thread_runs_inline(self):
        """Test one worker evaluates in the calling thread."""
        caller = threading.get_ident()
        idents = parallel_map(lambda _: threading.get_ident(), [1, 2, 3], threads=1)
        assert set(idents) == {caller}

    def test_empty_input(self):
        """Test an empty sequence gives an empty list."""
        assert parallel_map(str, [], threads=3) == []

    def test_module_level_override(self):
        """Test the override is stored on the module."""
        set_thread_override(7)
        assert parallel._override == 7


class TestErrors:
    """Test the error hierarchy and its exit codes."""

    @pytest.mark.parametrize(
        "error, code",
        [
            (InvariantViolation("x"), 1),
            (NonNeutralSource("x"), 1),
            (BoxTooSmall("x"), 1),
            (ConfigError("x"), 2),
            (IncommensurateGrids("x"), 2),
            (NoConvergence("x"), 3),
            (CGNoConvergence("x"), 3),
            (FitFailure("x"), 3),
            (NoBinding("x"), 0),
        ],
    )
    def test_exit_codes(self, error, code):
        """Test every failure maps to its exit code."""
        assert isinstance(error, PolaronLabError)
        assert error.exit_code == code

    def test_error_payload(self):
        """Test the JSON payload of a failure."""
        payload = IncommensurateGrids("box mismatch").to_dict()
        assert payload == {
            "status": "error",
            "error_type": "IncommensurateGrids",
            "error": "box mismatch",
            "exit_code": 2,
        }

    def test_no_binding_payload(self):
        """Test no binding is reported with energy 0."""
        payload = NoBinding("eps = 1").to_dict()
        assert payload == {"status": "no_binding", "message": "eps = 1", "energy": 0.0}

    def test_cg_failure_is_a_convergence_failure(self):
        """Test CG failures are caught as NoConvergence."""
        with pytest.raises(NoConvergence):
            raise CGNoConvergence("stalled")
