"""Stroke-level sketch semantic segmentation laboratory.

Submodules:
    data      -- sketch/stroke model, corpus IO, normalization, synthesis
    raster    -- rasterization, coordinate channels, narrow-band distance fields
    autodiff  -- reverse-mode tensor engine, Adam, checkpoints
    embednet  -- dual-decoder stroke embedding autoencoder
    segmenter -- group-wise autoregressive segmentation transformer
    metrics   -- stroke/grouping/component accuracy, invariance harnesses
    augment   -- generic and semantic-aware (copy-paste) augmentation
    cli       -- command-line entry point
"""

__version__ = "0.1.0"


class SketchsegError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SketchsegError):
    """Invalid configuration (bad values, unknown keys, unknown templates)."""


class DataError(SketchsegError):
    """Invalid input data (malformed files, invariant violations)."""
