"""Learning-free deformable registration with a deep image prior."""

__version__ = "0.1.0"
