"""Occlusion-aware probabilistic safe control at an unsignalised crossing."""

__version__ = "0.1.0"
