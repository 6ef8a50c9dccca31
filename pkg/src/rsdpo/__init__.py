"""Preference data generation by rejection sampling, with DPO, at desk scale."""

__version__ = "0.1.0"
