"""
DECODER SEARCH ENGINE - TEST SUITE
==================================

Tests for the search space, decoder graphs, tensor engine, proxy task,
cost model, controller, orchestration and remote evaluation.

Test Structure:
--------------
- unit/: Unit tests, one file per module
- integration/: Progressive search, resume, remote workers and the CLI
- validation/: Gradient suite, grammar fuzz, cost oracle, controller convergence

Test Categories (pytest markers):
---------------------------------
@pytest.mark.unit - Fast unit tests
@pytest.mark.integration - Cross-module integration
@pytest.mark.validation - Numerical and convergence validation
@pytest.mark.slow - Tests > 1 second

Running Tests:
-------------
# All tests
pytest

# Fast tests only (exclude slow)
pytest -m "not slow"

# Validation suite
pytest -m validation
"""
