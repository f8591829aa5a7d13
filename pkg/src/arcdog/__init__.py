"""Continuous domain generalization by closed-form activation regression."""

__version__ = "0.1.0"
