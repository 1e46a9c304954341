"""Iris capture quality-gate workbench."""

__version__ = "0.1.0"
