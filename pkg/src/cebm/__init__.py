"""Conjugate energy-based models in plain numpy.

Submodules: ``expfam`` (Gaussian/Bernoulli exponential families),
``autodiff`` (reverse-mode tape), ``model`` (CEBM, GMM-CEBM, baseline EBM),
``sampler`` (SGLD and replay buffer), ``trainer`` (PCD training),
``evaluation`` (metrics), ``data_io`` (datasets and file formats), ``cli``.
"""

__version__ = "0.1.0"
