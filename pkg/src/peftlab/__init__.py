"""Desk-scale parameter-efficient fine-tuning laboratory."""

__version__ = "0.1.0"
