"""dynsplat: CPU monocular SLAM for dynamic scenes on a 3D Gaussian map."""

__version__ = "0.1.0"
