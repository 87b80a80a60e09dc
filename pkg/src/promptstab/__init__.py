"""Prompt-sensitivity measurement and accuracy/stability prompt optimisation."""

__version__ = "0.1.0"
