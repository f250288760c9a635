"""Invariance gap between mean-field and invariance-abiding Gaussian posteriors."""

__version__ = "0.1.0"
