"""Multi-hop reasoning over multi-modal knowledge graphs with a gate-attention policy."""
__version__ = "0.1.0"
