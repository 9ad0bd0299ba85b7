"""Two-stream (appearance + optical flow) autoencoders for video anomaly detection."""

__version__ = "0.1.0"
