"""Numerical workbench for sonon carrier-wave fields, pilot-wave trajectories,
geometry-dependent oscillator coherence and Bell-test auditing."""

__version__ = "0.1.0"
