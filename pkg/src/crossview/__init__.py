"""Cross-view contrastive masked-autoencoder pre-training and its downstream
machinery: linear probing, fine-tuning, cross-view retrieval, and species
distribution mapping."""

__version__ = "0.1.0"
