"""Rehearsal-policy engine and benchmark harness for class-incremental learning."""

__version__ = "0.1.0"
