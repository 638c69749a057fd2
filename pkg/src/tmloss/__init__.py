"""Transformer-metric loss: a CNN embedding trained with a margin loss plus a
transformer-encoder auxiliary loss on the final convolution feature map."""

__version__ = "0.1.0"
