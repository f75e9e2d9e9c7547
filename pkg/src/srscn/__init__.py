"""Shape- and position-regularized cardiac segmentation on synthetic phantoms."""

__version__ = "0.1.0"
