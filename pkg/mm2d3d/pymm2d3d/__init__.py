"""
pymm2d3d - standalone library behind the mm2d3d command line.

Two-branch 2D/3D semantic segmentation with cross-modal learning and
self-training for unsupervised domain adaptation.
"""

__version__ = '0.1.0'
