"""
Numerical core: surfel scene, initialization, rasterization, losses,
optimization, evaluation and synthetic scene generation
"""
