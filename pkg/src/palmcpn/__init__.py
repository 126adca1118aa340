"""Touchless palmprint recognition with Gabor templates and 3D convolutional block features."""

__version__ = "0.1.0"
