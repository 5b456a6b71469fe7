"""Truth-preserving simulated patients and a diagnostic-robustness harness."""

__version__ = "0.1.0"
