"""Joint segmentation and registration of longitudinal 3D volumes, in numpy."""

__version__ = "0.1.0"
