"""Stitched value models on noisy latents for flow-matching generators."""

__version__ = "0.1.0"
