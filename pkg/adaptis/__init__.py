"""Point-proposal instance and panoptic segmentation on a synthetic toy benchmark."""

__version__ = "0.1.0"

__all__ = ["__version__"]
