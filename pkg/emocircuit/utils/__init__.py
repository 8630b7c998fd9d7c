"""Internal utilities for emocircuit."""
