"""Bimanual hand-object interaction synthesis for two-part articulated objects.

Submodules: ``geometry``, ``features``, ``hand``, ``contact``, ``diffusion``,
``refine``, ``metrics``, ``synthetic`` and ``pipeline``; ``cli`` wraps them.
"""
__version__ = "0.1.0"
