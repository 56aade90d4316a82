"""Spiking neural networks on event-camera data.

End-to-end tooling: event stream I/O and synthesis, binary voxel-cube
encoding, surrogate-gradient training of spiking classifiers and
single-shot detectors, and exact parameter / accumulate-operation /
spike-sparsity accounting.
"""

from . import autograd, detection, encoding, events, metrics, pipeline, spiking, tasks

__version__ = "0.1.0"

__all__ = [
    "autograd",
    "detection",
    "encoding",
    "events",
    "metrics",
    "pipeline",
    "spiking",
    "tasks",
]
