"""Proxy-guided controllable multiview 3D generation studio."""

__version__ = "0.1.0"
