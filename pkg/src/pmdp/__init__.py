"""Product-manifold projection autoencoder with disentanglement metrics."""

__version__ = "0.1.0"
