"""Synthesis of diverse task-level labeling functions from a typed DSL."""

__version__ = "0.1.0"
