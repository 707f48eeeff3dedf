"""Concept recognition on coin reverses with from-scratch ViT and CNN models, weak labels and HiPe saliency."""

__version__ = "0.1.0"
