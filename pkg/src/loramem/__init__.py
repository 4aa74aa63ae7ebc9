"""loramem: low-rank adapter memory engine and experiment lab."""

__version__ = "0.1.0"
