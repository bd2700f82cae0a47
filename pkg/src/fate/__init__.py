"""Firstly adapt, then categorize: two-stage prompt tuning at desk scale."""

__version__ = "0.1.0"
