"""Fair latent spaces from invertible flows over frozen encoder embeddings."""

__version__ = "0.1.0"
