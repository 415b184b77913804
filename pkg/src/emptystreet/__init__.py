"""Semantic 2D Gaussian splatting with object removal and time-reversal inpainting.

Kept import-light so the command line can bound thread pools before numpy loads.
"""

__version__ = "0.1.0"
