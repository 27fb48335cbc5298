"""LSVI-UCB on finite linear MDPs with exact regret and proof-layer diagnostics."""

__version__ = "0.1.0"
