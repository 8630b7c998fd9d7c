"""End-to-end tests for emocircuit."""
