"""Radar-assisted dynamic scene geometry: ego-motion, dynamic masks, depth scale
recovery, scene-flow lifting and invertible deformation fields."""

__version__ = "0.1.0"
