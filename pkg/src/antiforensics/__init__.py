"""Pixel-level anti-forensics against forgery localization networks."""

__version__ = "0.1.0"
