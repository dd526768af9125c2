"""Super-resolution-guided patch-free 3D segmentation at desk scale, on a small numpy autodiff engine."""

__version__ = "0.1.0"
