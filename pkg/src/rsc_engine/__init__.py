"""Core package for rsc-desk: tensors, body model, network, losses, data and training."""
__version__ = "1.1.0"
