"""Adversarial attacks on a toy segmentation network and uncertainty-based
detection of the attacked inputs."""
__version__ = "0.1.0"
