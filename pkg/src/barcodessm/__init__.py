"""DNA barcode language modeling with Mamba-style state space mixers."""

__version__ = "0.1.0"
