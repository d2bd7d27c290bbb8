"""
Dense monocular depth estimation from photometrically optimized surfels.
"""
__version__ = "0.1.0"
