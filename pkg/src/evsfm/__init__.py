"""Self-supervised structure from motion for event cameras.

Submodules:
    events    event streams, slice images and the EVT1 file format
    geometry  rigid-motion flow model, trajectory integration, calibration IO
    diffcore  reverse-mode differentiation engine and optimizer
    decorr    Denman-Beavers feature decorrelation
    ecn       evenly-cascaded depth and pose networks
    trainer   warping losses, training loop, inference
    metrics   flow / depth / egomotion evaluation
    synth     synthetic event-scene generator with exact ground truth
    viz       flow and depth rasters, feature-map dumps
    cli       command-line entry points
"""

from . import decorr, diffcore, ecn, events, geometry, metrics, synth, trainer, viz

__all__ = [
    "events",
    "geometry",
    "diffcore",
    "decorr",
    "ecn",
    "trainer",
    "metrics",
    "synth",
    "viz",
]

__version__ = "0.1.0"
