"""Integration tests for emocircuit."""
