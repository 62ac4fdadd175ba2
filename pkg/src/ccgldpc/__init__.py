"""GLDPC ensembles with convolutional constraint nodes: BEC/AWGN analysis,
code construction, decoding, and simulation."""

__version__ = "0.1.0"
