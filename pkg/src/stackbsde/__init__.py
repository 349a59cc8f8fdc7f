"""Stackelberg LQ games of backward SDEs under partial information."""
__version__ = "0.1.0"
