"""Multiscale finite elements with guaranteed constitutive-relation-error bounds."""

__version__ = "0.1.0"
