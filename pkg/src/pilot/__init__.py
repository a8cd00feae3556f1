"""Perceptive whole-body loco-manipulation controller for a planar legged robot."""

__version__ = "0.1.0"
