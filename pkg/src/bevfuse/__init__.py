"""Multi-view bird's-eye-view pedestrian detection and tracking."""

__version__ = "0.1.0"
