"""Prescriptive SAVR/TAVR treatment-policy toolkit."""

__version__ = "0.1.0"
