"""
roadsplat - road surface reconstruction with a meshgrid of Gaussian surfels
"""

__version__ = "1.0.0"
