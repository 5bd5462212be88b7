"""Symbolic-regression recovery of controller logic and logic-based attack detection."""

__version__ = "0.1.0"
