"""Early-warning and forensics toolkit for GPU-node telemetry archives."""

__version__ = "0.1.0"
