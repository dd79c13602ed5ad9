"""Harmonization, sampling, model kernels and DSC/NSD evaluation for text-prompted 3D segmentation."""

__version__ = "0.1.0"
