"""fusetrack: indoor positioning and tracking from smartphone sensors.

Pipeline stages: logfile ingestion, window framing (raw frames or recurrence
plots), pseudo-label generation between landmarks, a learned displacement
model with hand-written gradients, WiFi fingerprint positioning (k-NN and a
semi-supervised VAE), Kalman-filter fusion, and a map-free weighted-neighbor
projection. A synthetic simulator and an evaluation harness provide exact
oracles for every stage.
"""

__version__ = "0.1.0"

from . import bench, features, ingest, labels, neuralcore, pdr, tracking, wifi
from .errors import FusetrackError, ValidationError

__all__ = [
    "FusetrackError",
    "ValidationError",
    "bench",
    "features",
    "ingest",
    "labels",
    "neuralcore",
    "pdr",
    "tracking",
    "wifi",
    "__version__",
]
