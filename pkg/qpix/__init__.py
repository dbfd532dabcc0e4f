"""qpix: quantum image encoding, tensor-network compression and classifiers."""

__version__ = "1.0.0"
