"""Desk-scale quantitative-MRI synthesis toolkit.

Simulates weighted MR images from known T1/T2/PD maps, trains a
scan-parameter-conditioned encoder-decoder to invert them back into
quantitative maps, and cross-checks everything against a classical
voxel-wise nonlinear fitter plus a full image-quality metrics suite.
"""

__version__ = "0.1.0"
