"""Implicit glyph shapes built from quadratic curves."""
