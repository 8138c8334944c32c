"""Meta-learned, label-free, neuron-local weight updates for small MLPs."""

__version__ = "0.1.0"
