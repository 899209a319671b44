"""Pivot, push and grasp thin objects occluded by a wall."""

__version__ = "0.1.0"
