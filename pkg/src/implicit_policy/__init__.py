"""Implicit stochastic policies: normalizing-flow and parameter-noise policies,
entropy estimation by density-ratio classification, training loops, exact
tabular checks, and imitation of multi-modal experts."""

__version__ = "0.1.0"
