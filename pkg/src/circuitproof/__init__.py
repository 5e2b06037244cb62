"""circuitproof: proofreading engine for neural-circuit reconstructions."""

__version__ = "0.1.0"
