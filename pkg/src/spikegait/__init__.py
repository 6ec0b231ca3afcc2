"""Event-camera gait recognition: event synthesis, two-scale voxelization,
a spiking mixture-of-experts dynamic stream and a convolutional static stream."""

from spikegait._backend import BACKEND

__version__ = "0.1.0"
