"""Bundled model description files (*.mdl, YAML)."""
