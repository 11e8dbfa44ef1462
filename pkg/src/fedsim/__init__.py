"""Deterministic federated-learning simulator for network anomaly detection.

Combines capacity-proportional batch sizing, gradient-sign relevance
filtering of client updates, synchronous and buffered-asynchronous
aggregation, and Weibull-failure-aware adaptive checkpointing, all driven
by a seeded discrete-event clock so every run is replayable bit for bit.
"""

from .backends import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
