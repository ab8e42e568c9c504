"""Coordinate-guided V-Net lobe segmentation on synthetic chest phantoms."""

__version__ = "0.1.0"
