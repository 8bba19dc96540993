"""Tele-immersive stage streaming: RGB-D capture, densification, lossless depth
coding, framed transport, multi-unit fusion and a vibrotactile floor."""

from __future__ import annotations

from .errors import TelestageError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "TelestageError", "__version__"]
