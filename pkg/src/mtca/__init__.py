"""MTCA: counterfactually-augmented sparse-attention volatility classification."""

__version__ = "0.1.0"
