"""Dynamic 3D Gaussian splatting on an orientation-anchor scaffold.

Pipeline: lift 2D tracks to 3D trajectories, build a temporally propagated
orientation field over them, attach hyperdimensional Gaussian primitives,
deform and render at arbitrary frames, and fit everything to image and
track supervision.
"""

__version__ = "0.1.0"
