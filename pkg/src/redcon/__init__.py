"""Redundancy-aware contrastive video-text training at desk scale."""

__version__ = "0.1.0"
