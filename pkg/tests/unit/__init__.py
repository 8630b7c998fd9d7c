"""Unit tests for emocircuit."""
