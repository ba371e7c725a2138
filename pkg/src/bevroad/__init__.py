"""Road segmentation in bird's-eye view from camera and LiDAR."""

__version__ = "0.1.0"
