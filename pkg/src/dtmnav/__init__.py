"""Terrain-referenced visual navigation: pose from optical flow and a DTM, fused with an INS."""

__version__ = "0.1.0"
