"""acreg: anatomically constrained 2D deformable image registration.

A numpy library that trains a convolutional deformation-field
predictor under anatomical constraints (a pixel-level cross-entropy
loss on warped segmentation masks plus a global distance in the code
space of a denoising autoencoder) and applies it to multi-atlas
segmentation, registration-based quality estimation, and anatomical
feature extraction.
"""

from . import autodiff

__version__ = "0.1.0"
__all__ = ["autodiff", "__version__"]
