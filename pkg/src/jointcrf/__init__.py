"""Joint refinement of dense correspondence and foreground segmentation for image pairs."""

__version__ = "0.1.0"
