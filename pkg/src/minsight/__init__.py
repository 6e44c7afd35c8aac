"""Force-map sensing for a curved vision-based fingertip, on a synthetic sensor."""

__version__ = "0.1.0"

__all__ = [
    "geometry",
    "assignment",
    "embedding",
    "simulator",
    "dataset",
    "nn",
    "inference",
    "evaluation",
    "control",
    "palpation",
    "cli",
]
