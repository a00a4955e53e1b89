"""Desk-scale style-based GAN workbench for petrographic image sets.

Self-contained pipeline: dataset slicing and balancing, a style-based
generator/discriminator with adaptive augmentation trained on a kimg budget,
a Fréchet-distance metric with perturbation benchmarks, latent-space tools
(truncation, interpolation, mixing, projection, closed-form factorization),
a real-vs-generated survey harness, and an HTTP explorer over checkpoints.
"""

__version__ = "0.1.0"
