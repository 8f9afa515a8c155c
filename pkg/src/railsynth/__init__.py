"""railsynth: synthetic railway-obstacle data, optical-flow priors, and
binary railway segmentation with distance-banded evaluation."""

__version__ = "0.1.0"
