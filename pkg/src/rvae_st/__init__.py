"""Recurrent variational autoencoder for time series with progressive
sequence-length training, plus its data tools and diagnostics."""

__version__ = "0.1.0"
