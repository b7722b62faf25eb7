"""Spectral CT toolkit: fan-beam simulation, iterative reconstruction and
basis-material decomposition with optional TV regularization at both stages."""

__version__ = "0.1.0"

from .core import (
    AirMap,
    ChannelImageStack,
    FanBeamGeometry,
    MaterialMapStack,
    MixingMatrix,
    NoiseModel,
    SinogramStack,
    read_tensor,
    write_tensor,
)

__all__ = [
    "AirMap",
    "ChannelImageStack",
    "FanBeamGeometry",
    "MaterialMapStack",
    "MixingMatrix",
    "NoiseModel",
    "SinogramStack",
    "read_tensor",
    "write_tensor",
    "__version__",
]
