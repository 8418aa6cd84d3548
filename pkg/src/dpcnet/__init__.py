"""Numpy implementation of a dual-path pyramid-correction 3D segmentation network.

Modules: ``tensor``/``ops`` (reverse-mode autodiff), ``model``, ``losses``,
``io``/``data``, ``inference``, ``metrics``, ``trainer``, ``cli``.
"""

__version__ = "0.1.0"
