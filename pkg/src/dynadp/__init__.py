"""Differentially private SGD with dynamic privacy parameters.

Subpackages of interest: ``accountants`` (five composition methods),
``policies`` (decay schedules, clipping, sensitivity), ``trainer`` (the
DP-SGD loop), ``attack`` (gradient-matching reconstruction) and
``harness`` (config-driven experiments).
"""
__version__ = "0.1.0"
