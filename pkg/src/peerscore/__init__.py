"""Per-peer beneficialness scoring and prediction for Bitcoin P2P traces."""

__version__ = "0.1.0"
