"""Lead-aware spatial attention networks for 8-lead ECG classification."""

__version__ = "0.1.0"
