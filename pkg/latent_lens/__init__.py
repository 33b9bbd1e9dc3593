"""
latent-lens - sparse autoencoder analysis of speaker embedding corpora
"""

__version__ = "1.0.0"
