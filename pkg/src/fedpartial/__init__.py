"""Federated training of multi-organ segmentation from partially labeled sites."""

__version__ = "0.1.0"
