"""Desk-scale policy evaluation with learned action-conditional video world models."""

__version__ = "0.1.0"
