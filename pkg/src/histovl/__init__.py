"""Contrastive visual-language modelling for histopathology at desk scale."""

__version__ = "0.1.0"
