"""Integration tests for cross-module functionality."""
