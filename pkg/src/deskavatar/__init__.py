"""Desk-scale avatar reconstruction engine.

Geometry refinement driven by warped/projected surrogate textures,
multi-view texture de-lighting, and personalized animation rig building,
all verifiable on synthetic scenes with known ground truth.
"""

__version__ = "0.1.0"
