"""Adversarial representation learning for multi-channel imagery.

A numpy-based GAN whose discriminator doubles as a feature extractor:
multi-scale feature fusion, a perceptual + feature-matching generator
objective, and a linear-SVM evaluation pipeline, all on a small
reverse-mode autodiff engine with numba-accelerated convolutions.
"""

__version__ = "0.1.0"
