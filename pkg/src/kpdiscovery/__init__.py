"""Self-supervised keypoint discovery from spatiotemporal differences in behavioral videos."""

__version__ = "0.1.0"
