"""Anisotropic conditional flow matching driven by energy Hessians."""

__version__ = "0.1.0"
