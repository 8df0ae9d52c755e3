"""Medication-order anomaly detection engine and pharmacist review workbench."""

__version__ = "0.1.0"
