"""Parabolic Anderson model laboratory."""

__version__ = "0.1.0"
