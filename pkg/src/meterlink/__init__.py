"""Re-identification of re-pseudonymized smart-meter records."""

__version__ = "0.1.0"
