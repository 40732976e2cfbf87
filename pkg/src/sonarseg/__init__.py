"""U-Net fish segmentation for multibeam sonar fan images, on a small numpy autodiff engine."""

__version__ = "0.1.0"
