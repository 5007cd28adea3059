"""Validation tests for gradients, grammar invariants, cost and controller convergence."""
