"""Wasserstein-distance deep transfer learning for 1-D fault spectra, on numpy."""

__version__ = "0.1.0"
