"""Simultaneous bilinear control of N one-dimensional Schrodinger equations."""
