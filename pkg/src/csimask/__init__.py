"""Self-information masked CSI feedback with a transformer token-prediction decoder."""

__version__ = "0.1.0"
