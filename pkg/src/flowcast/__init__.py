"""Flow-guided tokenized video autoencoding and autoregressive forecasting."""

__version__ = "0.1.0"
