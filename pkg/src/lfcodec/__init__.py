"""Disparity-aware light field autoencoder codec."""

from .codec import decode_lightfield, encode_lightfield
from .lfdata import LightFieldGrid, load_sai_grid, save_sai_grid
from .model import LFCodecModel, load_checkpoint, save_checkpoint
from .transforms import TransformConfig

__version__ = "0.1.0"

__all__ = [
    "LFCodecModel",
    "LightFieldGrid",
    "TransformConfig",
    "decode_lightfield",
    "encode_lightfield",
    "load_checkpoint",
    "load_sai_grid",
    "save_checkpoint",
    "save_sai_grid",
]
