"""Obstacle-aware MPC navigation stack with segment-based intermediate targets."""

__version__ = "0.1.0"
