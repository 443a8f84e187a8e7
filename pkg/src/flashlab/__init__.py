"""flashlab: tiled exact attention, emulated FP8 numerics and a pipeline schedule simulator."""

__version__ = "0.1.0"
