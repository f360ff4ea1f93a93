"""Hybrid 2.5D-3D CT classification pipeline with domain-generalization training."""

__version__ = "0.1.0"
